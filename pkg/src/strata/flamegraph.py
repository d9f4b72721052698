"""Flame graph layout and SVG rendering for folded and differential profiles.

Widths are proportional to sample counts. In differential mode each
frame is drawn with the width of the first profile and tinted by the
change in its inclusive share: red where the first profile spends more,
blue where it spends less, grey where the shares agree.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence
from xml.sax.saxutils import escape

from .collector import FoldedProfile

WIDTH = 1200
ROW = 16
PAD = 10
HEADER = 30
MIN_WIDTH_PX = 0.1
NEUTRAL = "rgb(200,200,200)"


@dataclass
class Node:
    name: str
    count: int = 0
    other: int = 0
    children: dict[str, "Node"] = field(default_factory=dict)

    def child(self, name: str) -> "Node":
        node = self.children.get(name)
        if node is None:
            node = self.children[name] = Node(name)
        return node


@dataclass(frozen=True)
class Rect:
    name: str
    depth: int
    x: float        # fraction of the root width
    width: float
    count: int
    other: int
    delta: float    # share in the first profile minus share in the second


def build_tree(profile: FoldedProfile, other: FoldedProfile | None = None) -> Node:
    root = Node("all")
    for stack, c in profile.counts.items():
        root.count += c
        node = root
        for name in stack:
            node = node.child(name)
            node.count += c
    if other is not None:
        for stack, c in other.counts.items():
            root.other += c
            node = root
            for name in stack:
                node = node.child(name)
                node.other += c
    return root


def layout(root: Node) -> list[Rect]:
    """Rectangles in depth-first order; siblings sorted by name for stable output."""
    total, other_total = root.count, root.other
    rects: list[Rect] = []
    if not total:
        return rects

    def share(n: Node) -> float:
        if not other_total:
            return 0.0
        return n.count / total - n.other / other_total

    def walk(node: Node, depth: int, x: float) -> None:
        rects.append(Rect(node.name, depth, x / total, node.count / total, node.count, node.other,
                          share(node)))
        for name in sorted(node.children):
            ch = node.children[name]
            if ch.count:
                walk(ch, depth + 1, x)
                x += ch.count

    walk(root, 0, 0.0)
    return rects


def parse_diff(lines: Sequence[str]) -> tuple[FoldedProfile, FoldedProfile]:
    """Split ``frames countA countB`` lines back into the two profiles."""
    a, b = FoldedProfile(), FoldedProfile()
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head, ca, cb = line.rsplit(" ", 2)
        stack = head.split(";")
        if int(ca):
            a.add(stack, int(ca))
        if int(cb):
            b.add(stack, int(cb))
    return a, b


def _warm(name: str) -> str:
    # Deterministic per-name hue in the classic flame palette.
    h = hashlib.blake2b(name.encode(), digest_size=2).digest()
    return f"rgb({205 + h[0] % 50},{80 + h[1] % 120},{55})"


def _diff_color(delta: float, scale: float) -> str:
    if scale <= 0 or abs(delta) < 1e-12:
        return NEUTRAL
    t = min(1.0, abs(delta) / scale)
    fade = int(round(200 * (1 - t)))
    if delta > 0:
        return f"rgb(255,{fade},{fade})"
    return f"rgb({fade},{fade},255)"


def render_svg(profile: FoldedProfile, title: str = "Flame Graph",
               other: FoldedProfile | None = None, width: int = WIDTH) -> str:
    """SVG text for a flame graph; pass ``other`` for differential coloring."""
    rects = layout(build_tree(profile, other))
    depth = max((r.depth for r in rects), default=0)
    height = HEADER + (depth + 1) * ROW + 2 * PAD
    inner = width - 2 * PAD
    diff = other is not None
    scale = max((abs(r.delta) for r in rects), default=0.0)
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="rgb(250,250,250)"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="15">{escape(title)}</text>',
    ]
    total = rects[0].count if rects else 0
    for r in rects:
        w = r.width * inner
        if w < MIN_WIDTH_PX:
            continue
        x = PAD + r.x * inner
        y = height - PAD - (r.depth + 1) * ROW
        fill = _diff_color(r.delta, scale) if diff else _warm(r.name)
        tip = f"{r.name} ({r.count} samples, {r.count / total:.2%})"
        if diff:
            tip += f" vs {r.other}; share change {r.delta:+.2%}"
        out.append(f'<g><title>{escape(tip)}</title>'
                   f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{ROW - 1}" fill="{fill}"/>')
        chars = int(w // 7)
        if chars >= 3:
            label = r.name if len(r.name) <= chars else r.name[:chars - 2] + ".."
            out.append(f'<text x="{x + 3:.2f}" y="{y + ROW - 4}">{escape(label)}</text>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def one_sided(profile: FoldedProfile, other: FoldedProfile) -> list[str]:
    """Frames present in ``profile`` but absent from ``other`` at the same position."""
    rects = layout(build_tree(profile, other))
    return [r.name for r in rects if r.count and not r.other]
