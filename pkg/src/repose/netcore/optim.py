"""Adam with a piecewise-constant learning-rate schedule."""
import numpy as np


def lr_at(schedule, step):
    """``schedule`` is a list of ``(start_step, lr)`` with strictly increasing steps."""
    lr = schedule[0][1]
    for start, value in schedule:
        if step >= start:
            lr = value
        else:
            break
    return lr


class Adam:
    def __init__(self, store, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in store.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in store.params.items()}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for name, p in self.store.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (lr * corr) * m / (np.sqrt(v) + self.eps)

    def state(self):
        out = {f"optim.m.{n}": a for n, a in self.m.items()}
        out.update({f"optim.v.{n}": a for n, a in self.v.items()})
        out["optim.t"] = np.array([self.t], dtype=np.float64)
        return out

    def load_state(self, arrays):
        for n in self.m:
            self.m[n][...] = arrays[f"optim.m.{n}"]
            self.v[n][...] = arrays[f"optim.v.{n}"]
        self.t = int(arrays["optim.t"][0])
