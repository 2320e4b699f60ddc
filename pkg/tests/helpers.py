"""Finite-difference oracle shared by the gradient tests."""
import numpy as np

from deit import tensor as T

FD_STEP = 1e-6


def numeric_grads(fn, arrays, proj, step=FD_STEP):
    """Central differences of sum(fn(*arrays) * proj), evaluated in 64-bit."""
    with T.precision(np.float64):
        def f(xs):
            return float((fn(*[T.Tensor(x) for x in xs]).data * proj).sum())

        grads = []
        xs = [np.array(a, dtype=np.float64) for a in arrays]
        for x in xs:
            g = np.zeros_like(x)
            flat, gflat = x.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                h = step * max(1.0, abs(flat[i]))
                orig = flat[i]
                flat[i] = orig + h
                up = f(xs)
                flat[i] = orig - h
                down = f(xs)
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def analytic_grads(fn, arrays, proj, dtype):
    with T.precision(dtype):
        ts = [T.Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in arrays]
        out = fn(*ts)
        loss = T.sum_(T.mul(out, T.Tensor(proj)))
        loss.backward()
        return [t.grad.astype(np.float64) if t.grad is not None else np.zeros(t.shape)
                for t in ts]


def rel_error(a, b):
    """Max abs difference scaled by the largest gradient magnitude."""
    denom = max(np.abs(b).max(initial=0.0), np.abs(a).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def gradcheck(fn, arrays, dtype, rng):
    """Max relative error between tape gradients (in ``dtype``) and the 64-bit oracle."""
    with T.precision(np.float64), T.no_grad():
        shape = fn(*[T.Tensor(np.asarray(a, np.float64)) for a in arrays]).shape
    proj = rng.standard_normal(shape)
    ana = analytic_grads(fn, arrays, proj, dtype)
    num = numeric_grads(fn, arrays, proj)
    # one scale per case: inputs whose exact gradient is near zero (e.g. a
    # 2-wide layer norm) would otherwise turn 32-bit rounding into large ratios
    scale = max(max(np.abs(n).max(initial=0.0) for n in num), 1e-8)
    return max(float(np.abs(a - n).max(initial=0.0)) / scale for a, n in zip(ana, num))


TOLERANCE = {np.float32: 1e-3, np.float64: 1e-6}


def model_grad_error(dtype, picks=20, seed=11):
    """Relative error of DeiT-micro gradients on randomly chosen scalar parameters."""
    from deit.model import DeiTModel, preset
    rng = np.random.default_rng(seed)
    cfg = preset("deit-micro", num_classes=4, image_size=16, drop_path_rate=0.0)
    with T.precision(np.float64):
        ref = DeiTModel(cfg, seed=3)
    x = rng.standard_normal((2, 3, 16, 16))
    proj_c, proj_d = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    named = ref.named_parameters()
    names = sorted(named)
    chosen = [(names[i], tuple(int(rng.integers(s)) for s in named[names[i]].shape))
              for i in rng.integers(len(names), size=picks)]

    def loss_of(model):
        out = model.forward(x)
        return T.add(T.sum_(T.mul(out.class_logits, T.Tensor(proj_c))),
                     T.sum_(T.mul(out.distill_logits, T.Tensor(proj_d))))

    with T.precision(dtype):
        model = DeiTModel(cfg, seed=3)
        for n, p in model.named_parameters().items():
            p.data = named[n].data.astype(dtype)
        loss_of(model).backward()
        ana = np.array([model.named_parameters()[n].grad[i] for n, i in chosen], np.float64)

    num = []
    with T.precision(np.float64):
        for n, i in chosen:
            p = named[n].data
            orig = p[i]
            h = 1e-6 * max(1.0, abs(orig))
            p[i] = orig + h
            up = float(loss_of(ref).data)
            p[i] = orig - h
            down = float(loss_of(ref).data)
            p[i] = orig
            num.append((up - down) / (2 * h))
    return rel_error(ana, np.array(num))
