"""Independent reference computations used by the tests.

Nothing here calls into the code paths it checks: voxel sets come from
dense sampling or analytic slab tests, attention from dense masked
softmax, gradients from central differences, matchings from brute force.
"""

import itertools

import numpy as np
import torch


def chord_length(origin, direction, t0, t1, lower, upper) -> float:
    """Length of the part of segment ``o + t d, t in [t0, t1]`` inside a box."""
    ta = np.full(3, -np.inf)
    tb = np.full(3, np.inf)
    for a in range(3):
        if direction[a] == 0:
            if not lower[a] <= origin[a] <= upper[a]:
                return 0.0
            continue
        x = (lower[a] - origin[a]) / direction[a]
        y = (upper[a] - origin[a]) / direction[a]
        ta[a], tb[a] = min(x, y), max(x, y)
    lo = max(ta.max(), t0)
    hi = min(tb.min(), t1)
    return max(hi - lo, 0.0) * float(np.linalg.norm(direction))


def sampled_voxels(origin, direction, t0, t1, grid_origin, voxel_size, dims, step):
    """Voxels hit by points sampled every ``step`` along the segment, in first-hit order."""
    n = int(np.ceil((t1 - t0) / step)) + 1
    ts = np.linspace(t0, t1, n)
    pts = origin + ts[:, None] * direction
    rel = (pts - grid_origin) / voxel_size
    ijk = np.floor(rel).astype(np.int64)
    inside = np.all((ijk >= 0) & (ijk < np.asarray(dims)), axis=1)
    ijk = ijk[inside]
    seen = {}
    for key in map(tuple, ijk):
        seen.setdefault(key, None)
    return list(seen)


def brute_force_pairs(views, grid, t_near, t_far, min_chord=1e-9):
    """Every (view, row, col, voxel) whose feature-center ray crosses the voxel interior."""
    nx, ny, nz = grid.dims
    ijk = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), -1).reshape(-1, 3)
    lower = grid.origin + ijk * grid.voxel_size
    upper = lower + grid.voxel_size
    out = []
    for v, view in enumerate(views):
        k = view.intrinsics
        sy = k.height // view.feature_height
        sx = k.width // view.feature_width
        for r in range(view.feature_height):
            for c in range(view.feature_width):
                u, w = (c + 0.5) * sx, (r + 0.5) * sy
                d_cam = np.array([(u - k.cx) / k.fx, (w - k.cy) / k.fy, 1.0])
                d = view.pose.rotation @ (d_cam / np.linalg.norm(d_cam))
                o = view.pose.translation
                with np.errstate(divide="ignore", invalid="ignore"):
                    ta = (lower - o) / d
                    tb = (upper - o) / d
                t_lo = np.where(d == 0, np.where((o >= lower) & (o <= upper), -np.inf, np.inf), np.minimum(ta, tb))
                t_hi = np.where(d == 0, np.where((o >= lower) & (o <= upper), np.inf, -np.inf), np.maximum(ta, tb))
                lo = np.maximum(t_lo.max(1), t_near)
                hi = np.minimum(t_hi.min(1), t_far)
                for hit in np.nonzero(hi - lo > min_chord)[0]:
                    out.append((v, r, c, *ijk[hit]))
    return sorted(out)


def dense_masked_attention(target, source, mask, w_q, w_k, w_v, w_o, n_heads):
    """Plain multi-head attention with -inf logits off the mask; empty rows give 0."""
    r, c = target.shape[0], source.shape[0]
    dh = w_q.shape[1] // n_heads
    q = (target @ w_q).reshape(r, n_heads, dh).transpose(0, 1)
    k = (source @ w_k).reshape(c, n_heads, dh).transpose(0, 1)
    v = (source @ w_v).reshape(c, n_heads, dh).transpose(0, 1)
    logits = q @ k.transpose(1, 2) / np.sqrt(dh)
    logits = logits.masked_fill(~mask.unsqueeze(0), float("-inf"))
    attn = torch.softmax(logits, dim=-1)
    attn = torch.nan_to_num(attn, nan=0.0)
    heads = (attn @ v).transpose(0, 1).reshape(r, n_heads * dh)
    return heads @ w_o


def central_difference(fn, tensors, h=1e-5):
    """Gradient of scalar ``fn()`` w.r.t. each tensor by central differences (in place perturbation)."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(fn())
                flat[i] = orig - h
                fm = float(fn())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    a = analytic.detach().reshape(-1).double()
    n = numeric.detach().reshape(-1).double()
    scale = torch.maximum(a.abs().max(), n.abs().max()).clamp(min=floor)
    return float((a - n).abs().max() / scale)


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    n_q, n_gt = cost.shape
    best = np.inf
    for slots in itertools.permutations(range(n_q), n_gt):
        best = min(best, sum(cost[s, g] for g, s in enumerate(slots)))
    return float(best)


def sampled_gradient_error(fn, tensors, per_tensor=25, seed=0, h=1e-5, floor=1e-3):
    """Worst relative error between autograd and central differences at sampled coordinates.

    Each tensor is scored against its own largest analytic gradient entry,
    floored at ``floor`` times the largest entry over all tensors so that
    tensors with negligible influence are not judged on roundoff alone.
    """
    analytic = torch.autograd.grad(fn(), tensors, allow_unused=True)
    overall = max(float(g.abs().max()) for g in analytic if g is not None)
    gen = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, analytic):
            g = torch.zeros_like(t) if g is None else g
            flat = t.data.view(-1)
            picks = gen.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            numeric = []
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(fn())
                flat[i] = orig - h
                fm = float(fn())
                flat[i] = orig
                numeric.append((fp - fm) / (2 * h))
            scale = max(float(g.abs().max()), floor * overall, 1e-12)
            err = np.abs(g.reshape(-1)[picks].numpy() - np.array(numeric)).max() / scale
            worst = max(worst, float(err))
    return worst


def ray_hits_cell_grid(origin, direction, shape, t_min=0.0):
    """Exact slab test of one canonical-frame ray against every occupied cell of a shape grid."""
    size = shape.shape[0]
    ijk = np.argwhere(shape)
    if ijk.size == 0:
        return False
    lower = ijk / size - 0.5
    upper = lower + 1.0 / size
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lower - origin) / direction
        tb = (upper - origin) / direction
    inside = (origin >= lower) & (origin <= upper)
    t_lo = np.where(direction == 0, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
    t_hi = np.where(direction == 0, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
    lo = np.maximum(t_lo.max(1), t_min)
    return bool(np.any(t_hi.min(1) > lo))


def point_in_posed_shape(point, center, scale, yaw, shape):
    """Direct inverse pose and cell lookup for a single world point."""
    c, s = np.cos(yaw), np.sin(yaw)
    dx, dy, dz = np.asarray(point) - center
    local = np.array([c * dx + s * dy, -s * dx + c * dy, dz]) / scale
    if np.any(local < -0.5) or np.any(local >= 0.5):
        return False
    size = shape.shape[0]
    i, j, k = (int(v) for v in np.minimum(np.floor((local + 0.5) * size), size - 1))
    return bool(shape[i, j, k])
