"""Independent reference implementations used by the tests."""

import math


def brute_knn_predict(train, labels, query, k):
    """Plain-Python k-NN: distances by explicit sums, stable index order on
    ties, majority vote with ties going to the class of the nearest member."""
    dists = []
    for i, row in enumerate(train):
        d = math.fsum((a - b) ** 2 for a, b in zip(row, query))
        dists.append((d, i))
    dists.sort()
    near = [labels[i] for _, i in dists[:k]]
    tally = {}
    for rank, lab in enumerate(near):
        cnt, first = tally.get(lab, (0, rank))
        tally[lab] = (cnt + 1, first)
    return min(tally, key=lambda lab: (-tally[lab][0], tally[lab][1]))


def brute_knn_decode(train, ytrain, val, yval, test, ytest, ks=range(1, 20, 2)):
    best_k, best_acc = None, -1.0
    for k in ks:
        if k > len(train):
            continue
        acc = sum(brute_knn_predict(train, ytrain, q, k) == y for q, y in zip(val, yval)) / len(val)
        if acc > best_acc:
            best_k, best_acc = k, acc
    preds = [brute_knn_predict(train, ytrain, q, best_k) for q in test]
    return best_k, sum(p == y for p, y in zip(preds, ytest)) / len(test), preds
