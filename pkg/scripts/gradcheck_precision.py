"""Where does the finite-difference gradient check lose accuracy?

For every loss config, compares the analytic gradient against central
differences on 1000 random pixels (H in [0, 1], Z in [-10, 10]) using
(a) float64 with step 1e-4, as the gradcheck command does,
(b) long double with step 1e-4, which removes most rounding error, and
(c) long double with step 1e-6, which also shrinks the truncation error.
The worst relative error of each is printed with the pixel where (a) is worst.
"""
import numpy as np

from sparsekp.losses import ABLATION_ROWS, VARIANTS, LossConfig, loss_pixels, make_ablation_config


def rel(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def central(h, z, cfg, step, dtype):
    hz, zz, s = h.astype(dtype), z.astype(dtype), dtype(step)
    num = (loss_pixels(hz, zz + s, cfg, 1)[0] - loss_pixels(hz, zz - s, cfg, 1)[0]) / (2 * s)
    return num.astype(np.float64)


def main():
    configs = [(v, LossConfig(v)) for v in VARIANTS] + [(r, make_ablation_config(r)) for r in ABLATION_ROWS]
    print(f"{'config':<20}{'f64 1e-4':>10}{'f128 1e-4':>11}{'f128 1e-6':>11}   worst f64 pixel (H, Z, grad)")
    for name, cfg in configs:
        rng = np.random.default_rng(0)
        h = rng.uniform(0, 1, 1000)
        h[rng.random(1000) < 0.25] = 0.0
        z = rng.uniform(-10, 10, 1000)
        _, g = loss_pixels(h, z, cfg, 1)
        errs = [rel(g, central(h, z, cfg, s, dt)) for s, dt in
                ((1e-4, np.float64), (1e-4, np.longdouble), (1e-6, np.longdouble))]
        i = int(np.argmax(errs[0]))
        print(f"{name:<20}{errs[0].max():>10.1e}{errs[1].max():>11.1e}{errs[2].max():>11.1e}   "
              f"({h[i]:.3f}, {z[i]:+.3f}, {g[i]:.2e})")


if __name__ == "__main__":
    main()
