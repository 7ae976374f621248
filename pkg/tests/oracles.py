"""Independent brute-force oracles used by the test suite.

Everything here is written against the raw definitions (window
enumeration, per-voxel tallies, all-pairs distances) using numpy only,
so the fast library paths are checked against code that shares nothing
with them.
"""

import numpy as np


def count_window_placements(i: int, k: int, s: int, p: int) -> int:
    """Number of valid kernel placements along one padded axis."""
    count = 0
    pos = 0
    while pos + k <= i + 2 * p:
        count += 1
        pos += s
    return count


def conv3d_sixloop(x, w, bias, stride, padding):
    """Direct six-nested-loop cross-correlation."""
    b, D, H, W, ci = x.shape
    kd, kh, kw, _, co = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.zeros((b, D + 2 * pd, H + 2 * ph, W + 2 * pw, ci))
    xp[:, pd:pd + D, ph:ph + H, pw:pw + W] = x
    od = count_window_placements(D, kd, sd, pd)
    oh = count_window_placements(H, kh, sh, ph)
    ow = count_window_placements(W, kw, sw, pw)
    y = np.zeros((b, od, oh, ow, co))
    for n in range(b):
        for zo in range(od):
            for yo in range(oh):
                for xo in range(ow):
                    region = xp[n, zo * sd:zo * sd + kd,
                                yo * sh:yo * sh + kh,
                                xo * sw:xo * sw + kw, :]
                    for c in range(co):
                        y[n, zo, yo, xo, c] = np.sum(region * w[..., c]) + bias[c]
    return y


def conv_transpose3d_scatter(x, w, bias, stride, padding, out_extents):
    """Scatter every input voxel through the kernel into the output grid."""
    b, id_, ih, iw, co = x.shape
    kd, kh, kw, ci, _ = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    od, oh, ow = out_extents
    y = np.zeros((b, od, oh, ow, ci))
    for n in range(b):
        for zi in range(id_):
            for yi in range(ih):
                for xi in range(iw):
                    for a in range(kd):
                        for bb in range(kh):
                            for cc in range(kw):
                                zo = zi * sd + a - pd
                                yo = yi * sh + bb - ph
                                xo = xi * sw + cc - pw
                                if 0 <= zo < od and 0 <= yo < oh and 0 <= xo < ow:
                                    for c in range(ci):
                                        y[n, zo, yo, xo, c] += float(
                                            np.dot(w[a, bb, cc, c], x[n, zi, yi, xi])
                                        )
    return y + bias


def soft_dice_plain(p, g) -> float:
    """Squared-denominator soft Dice, no smoothing."""
    return 2.0 * float(np.sum(p * g)) / float(np.sum(p * p) + np.sum(g * g))


def central_difference(f, x: np.ndarray, index, eps: float) -> float:
    x = x.copy()
    keep = x.flat[index]
    x.flat[index] = keep + eps
    hi = f(x)
    x.flat[index] = keep - eps
    lo = f(x)
    return (hi - lo) / (2.0 * eps)


def confusion_tally(pred, true):
    """Per-voxel brute-force confusion counts (tp, fp, fn, tn)."""
    tp = fp = fn = tn = 0
    for p, t in zip(pred.reshape(-1), true.reshape(-1)):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def surface_by_neighbours(mask):
    """Foreground voxels adjacent (6-connectivity) to background or border."""
    m = mask.astype(bool)
    nx, ny, nz = m.shape
    out = np.zeros_like(m)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                if not m[x, y, z]:
                    continue
                for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                                   (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    u, v, w = x + dx, y + dy, z + dz
                    if not (0 <= u < nx and 0 <= v < ny and 0 <= w < nz) or not m[u, v, w]:
                        out[x, y, z] = True
                        break
    return out


def hausdorff_allpairs(pred, true, spacing, percentile=95.0) -> float:
    """All-pairs directed-distance percentile Hausdorff."""
    ps = np.argwhere(surface_by_neighbours(pred)) * np.asarray(spacing)
    ts = np.argwhere(surface_by_neighbours(true)) * np.asarray(spacing)
    if len(ps) == 0 or len(ts) == 0:
        return float("nan")
    pairwise = np.sqrt(((ts[:, None, :] - ps[None, :, :]) ** 2).sum(axis=2))
    d_t = pairwise.min(axis=1)
    d_p = pairwise.min(axis=0)
    return float(max(np.percentile(d_t, percentile), np.percentile(d_p, percentile)))


def region_masks_by_codes(labels):
    """ET/WT/TC masks straight from the code-set definitions."""
    return {
        "ET": labels == 4,
        "WT": (labels == 1) | (labels == 2) | (labels == 4),
        "TC": (labels == 1) | (labels == 4),
    }


def evaluate_case_reference(pred_labels, true_labels, spacing):
    """Second-implementation evaluator: region -> (dice, sens, spec, hd95)."""
    preds = region_masks_by_codes(pred_labels)
    trues = region_masks_by_codes(true_labels)
    out = {}
    for region in ("ET", "WT", "TC"):
        tp, fp, fn, tn = confusion_tally(preds[region], trues[region])
        dice = 1.0 if tp + fp + fn == 0 else 2.0 * tp / (2.0 * tp + fp + fn)
        sens = 1.0 if tp + fn == 0 else tp / (tp + fn)
        spec = 1.0 if tn + fp == 0 else tn / (tn + fp)
        hd = hausdorff_allpairs(preds[region], trues[region], spacing)
        out[region] = (dice, sens, spec, hd)
    return out
