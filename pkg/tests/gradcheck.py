"""Central-difference gradient checks for the renderer."""

import numpy as np

from splatdenoise.gaussian import Camera, Scene, rgb_to_sh
from splatdenoise.renderer import ALPHA_MAX, ALPHA_MIN, backward, render

GROUPS = (("means", "d_mean"), ("log_scales", "d_log_scale"), ("rotations", "d_rotation"),
          ("raw_opacities", "d_raw_opacity"), ("sh_dc", "d_sh_dc"))


def random_scene(rng, n, spread=0.5):
    return Scene(rng.uniform(-spread, spread, (n, 3)), np.log(rng.uniform(0.1, 0.3, (n, 3))),
                 rng.normal(size=(n, 4)), rng.normal(size=n), rgb_to_sh(rng.uniform(0, 1, (n, 3))))


def branch_signature(out) -> bytes:
    """Which discrete branches of the compositor each pixel takes.

    Compositing is piecewise smooth: alpha is dropped below 1/255, clamped
    at 0.999 and the front-to-back loop stops early. Two renders with equal
    signatures lie on the same smooth piece.
    """
    p = out.projection
    h, w = out.final_transmittance.shape
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs[None] - p.uv[:, 0, None, None]
    dy = ys[None] - p.uv[:, 1, None, None]
    a, b, c = (p.conic[:, i, None, None] for i in range(3))
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    raw = p.opacity[:, None, None] * np.exp(np.minimum(power, 0.0))
    masks = np.stack([power > 0.0, raw >= ALPHA_MIN, raw > ALPHA_MAX])
    return p.index.tobytes() + out.n_contrib.tobytes() + np.packbits(masks).tobytes()


def check_gradients(seed, n=5, res=32, h=1e-5, dtype=np.float64, stats=None):
    """Worst per-entry relative error of the analytic gradient of <G, render>.

    Central differences are used wherever both stencil points stay on the
    same smooth piece as the base point; when one side crosses a branch
    boundary a second-order one-sided difference from the other side is used, and an
    entry whose stencil crosses on both sides is skipped. ``stats`` (a dict)
    receives the counts. In float32 the reference is the float64 analytic
    gradient, since finite differences are dominated by rounding there.
    """
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n)
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], [0, -1, 0], 40.0, (res, res))
    bg = (0.1, 0.2, 0.3)
    G = rng.normal(size=(res, res, 3))
    analytic = backward(scene, cam, render(scene, cam, bg, dtype=dtype), G)
    if dtype != np.float64:
        ref = backward(scene, cam, render(scene, cam, bg), G)
        worst = 0.0
        for _, g in GROUPS:
            a, r = getattr(analytic, g), getattr(ref, g)
            worst = max(worst, np.linalg.norm(a - r) / max(np.linalg.norm(r), 1e-12))
        return worst

    def evaluate(s):
        out = render(s, cam, bg)
        return float(np.sum(out.rgb * G)), branch_signature(out)

    stats = {} if stats is None else stats
    stats.update(central=0, one_sided=0, skipped=0)
    l0, sig0 = evaluate(scene)
    worst = 0.0
    for name, g in GROUPS:
        arr = getattr(scene, name)
        for idx in np.ndindex(arr.shape):
            plus, minus = scene.copy(), scene.copy()
            getattr(plus, name)[idx] += h
            getattr(minus, name)[idx] -= h
            (lp, sp), (lm, sm) = evaluate(plus), evaluate(minus)
            fd = None
            if sp == sig0 and sm == sig0:
                fd = (lp - lm) / (2 * h)
                stats["central"] += 1
            else:
                for side, l1 in ((1.0, lp), (-1.0, lm)):
                    if (sp if side > 0 else sm) != sig0:
                        continue
                    far = scene.copy()
                    getattr(far, name)[idx] += 2 * side * h
                    l2, s2 = evaluate(far)
                    if s2 == sig0:
                        # second-order one-sided stencil
                        fd = side * (-3 * l0 + 4 * l1 - l2) / (2 * h)
                        stats["one_sided"] += 1
                        break
            if fd is None:
                stats["skipped"] += 1
                continue
            a = getattr(analytic, g)[idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst
