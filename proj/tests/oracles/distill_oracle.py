#!/usr/bin/env python3
"""Reference values for the distillation loss tests, computed independently.

Plain softmax / cross-entropy arithmetic on small fixed batches; the C++
tests assert the printed values verbatim.
"""
import math

def softmax(row, temp=1.0):
    scaled = [v / temp for v in row]
    m = max(scaled)
    exps = [math.exp(v - m) for v in scaled]
    s = sum(exps)
    return [e / s for e in exps]

def xent(target, probs):
    return -sum(t * math.log(p) for t, p in zip(target, probs))

def onehot(idx, n):
    return [1.0 if i == idx else 0.0 for i in range(n)]

STUDENT = [[1.25, -0.75], [0.10, 0.40], [-2.00, 1.50]]
TEACHER = [[2.00, -1.00], [-0.30, 0.80], [-1.20, 2.20]]
LABELS = [0, 1, 1]
LAM, TEMP = 0.5, 10.0

def distill_loss(student, teacher, labels, lam, temp):
    n = len(student)
    gt = sum(xent(onehot(y, len(row)), softmax(row, temp))
             for row, y in zip(student, labels)) / n
    z = [softmax(row, temp) for row in teacher]
    im = sum(xent(zi, softmax(row, temp)) for row, zi in zip(student, z)) / n
    return (1.0 - lam) * gt + lam * im

if __name__ == "__main__":
    print("soften([2,0], T=2) =", ["%.10f" % p for p in softmax([2.0, 0.0], 2.0)])
    v = distill_loss(STUDENT, TEACHER, LABELS, LAM, TEMP)
    print("distill λ=0.5 T=10 fixture = %.15f" % v)
    v0 = distill_loss(STUDENT, TEACHER, LABELS, 0.0, TEMP)
    v1 = distill_loss(STUDENT, TEACHER, LABELS, 1.0, TEMP)
    print("lambda affine check: %.18f vs %.18f" % (v, 0.5 * (v0 + v1)))
    # plain CE at T=1, lambda=0 (Eq.-4 reduction case)
    plain = distill_loss(STUDENT, TEACHER, LABELS, 0.0, 1.0)
    print("plain CE T=1 = %.15f" % plain)
