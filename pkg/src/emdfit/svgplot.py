"""Dependency-free SVG rendering of fit frames.

A frame overlays, in paint order: the potential heatmap (colored cells on a
fixed diverging ramp, symmetric about zero), the event particles, the
current shape sample, and the per-point force arrows.
"""

import numpy as np

_SIZE = 640
_MARGIN = 40


def _ramp(t):
    """Diverging blue-white-red ramp; t in [0, 1], 0.5 maps to white."""
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        u = t / 0.5
        r, g, b = 0.231 + u * (1 - 0.231), 0.298 + u * (1 - 0.298), \
            0.753 + u * (1 - 0.753)
    else:
        u = (t - 0.5) / 0.5
        r, g, b = 1 - u * (1 - 0.706), 1 - u * (1 - 0.016), 1 - u * (1 - 0.150)
    return f"#{int(r * 255):02x}{int(g * 255):02x}{int(b * 255):02x}"


def render_frame(bounds, heatmap=None, event_points=None, event_weights=None,
                 shape_points=None, forces=None, title=None):
    """Compose one SVG document (a string) for the given overlays.

    `bounds` is (x0, x1, y0, y1) in data coordinates; `heatmap` is a 2-d
    array laid out as in `potential_heatmap` (row r = y0 + r*dy).
    """
    x0, x1, y0, y1 = bounds
    span = _SIZE - 2 * _MARGIN

    def to_px(xy):
        px = _MARGIN + (xy[0] - x0) / (x1 - x0) * span
        py = _SIZE - _MARGIN - (xy[1] - y0) / (y1 - y0) * span
        return px, py

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" '
        f'height="{_SIZE}" viewBox="0 0 {_SIZE} {_SIZE}">',
        f'<rect width="{_SIZE}" height="{_SIZE}" fill="white"/>',
    ]
    if heatmap is not None:
        hm = np.asarray(heatmap)
        res_y, res_x = hm.shape
        vmax = float(np.max(np.abs(hm))) or 1.0
        cw = span / res_x
        ch = span / res_y
        for r in range(res_y):
            for c in range(res_x):
                t = 0.5 + 0.5 * hm[r, c] / vmax
                px = _MARGIN + c * cw
                py = _SIZE - _MARGIN - (r + 1) * ch
                parts.append(
                    f'<rect x="{px:.2f}" y="{py:.2f}" width="{cw + 0.5:.2f}" '
                    f'height="{ch + 0.5:.2f}" fill="{_ramp(t)}"/>')
    if event_points is not None:
        w = event_weights
        if w is None:
            w = np.full(len(event_points), 1.0 / len(event_points))
        wmax = float(np.max(w))
        for xy, wi in zip(event_points, w):
            px, py = to_px(xy)
            rad = 2.0 + 4.0 * (wi / wmax)
            parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="{rad:.2f}" '
                         f'fill="#1a9641" fill-opacity="0.85"/>')
    if shape_points is not None:
        for xy in shape_points:
            px, py = to_px(xy)
            parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3.0" '
                         f'fill="none" stroke="#d7191c" stroke-width="1.6"/>')
    if forces is not None and shape_points is not None:
        scale = 0.15 * max(x1 - x0, y1 - y0)
        fmax = float(np.max(np.sqrt(np.sum(np.asarray(forces) ** 2, axis=1))))
        if fmax > 0:
            for xy, f in zip(shape_points, forces):
                tip = (xy[0] + scale * f[0] / fmax, xy[1] + scale * f[1] / fmax)
                (ax, ay), (bx, by) = to_px(xy), to_px(tip)
                parts.append(
                    f'<line x1="{ax:.2f}" y1="{ay:.2f}" x2="{bx:.2f}" '
                    f'y2="{by:.2f}" stroke="#000000" stroke-width="1.0" '
                    f'marker-end="url(#ah)"/>')
            parts.insert(2, '<defs><marker id="ah" markerWidth="6" '
                            'markerHeight="6" refX="5" refY="3" orient="auto">'
                            '<path d="M0,0 L6,3 L0,6 z" fill="#000"/>'
                            '</marker></defs>')
    if title:
        parts.append(f'<text x="{_MARGIN}" y="{_MARGIN - 12}" '
                     f'font-family="sans-serif" font-size="14">{title}</text>')
    parts.append("</svg>")
    return "\n".join(parts)
