"""Tiny hand-analyzable models for attack tests."""

import numpy as np

from longattack import tensor as T
from longattack.tensor import Tensor


class LogisticSource:
    """One-feature logistic classifier: logits [0, w.x + b], identity features.

    P(class 1) = sigmoid(w.x + b), so gradients are known in closed form.
    """

    kind = "source"

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)

    def logits(self, x):
        z1 = T.reshape(T.sum_(x * Tensor(self.w)) + self.b, (1,))
        return T.concat([Tensor(np.zeros(1)), z1])

    def features(self, x):
        return T.reshape(x, (x.size,))

    def features_and_logits(self, x):
        return self.features(x), self.logits(x)

    def probs(self, x):
        return T.softmax(self.logits(Tensor(np.asarray(x, float))), axis=-1).data
