"""Regenerate the bundled ``miniworksite`` fixture scene.

Writes OBJ/MTL files, a floor texture and the scene descriptor into
``src/synthpan/data/miniworksite``. The output is committed; rerun only when
the fixture layout changes (and update ``manifest.json`` by hand).

Layout (meters, z up): a 6 x 5 x 3 room with four walls and a textured
floor, a box-shaped workbench along the back wall, a cabinet in the
corner, and five box-shaped movable tools.
"""

from pathlib import Path

import numpy as np
from PIL import Image

OUT = Path(__file__).resolve().parents[1] / "src/synthpan/data/miniworksite"

PALETTE = {
    "floor": (128, 64, 128), "wall": (70, 70, 70), "workbench": (152, 251, 152),
    "cabinet": (70, 130, 180), "power_supply": (255, 0, 0), "oscilloscope": (0, 0, 142),
    "clamp": (0, 0, 70), "screwdriver": (0, 60, 100), "multimeter": (255, 127, 14),
}
APPEARANCE = {
    "floor": (150, 150, 150), "wall": (205, 200, 190), "workbench": (140, 100, 60),
    "cabinet": (90, 95, 100), "power_supply": (40, 40, 45), "oscilloscope": (200, 200, 205),
    "clamp": (200, 60, 30), "screwdriver": (230, 200, 20), "multimeter": (240, 180, 0),
}


def mtl_block(name, texture=None):
    kd = " ".join(f"{c / 255:.6f}" for c in PALETTE[name])
    ka = " ".join(f"{c / 255:.6f}" for c in APPEARANCE[name])
    lines = [f"newmtl {name}", f"Kd {kd}", f"Ka {ka}"]
    if texture:
        lines.append(f"map_Ka {texture}")
    return "\n".join(lines) + "\n"


def box(x0, y0, z0, x1, y1, z1):
    v = [(x, y, z) for z in (z0, z1) for y in (y0, y1) for x in (x0, x1)]
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    return v, quads


class ObjWriter:
    def __init__(self, mtllib):
        self.lines = [f"mtllib {mtllib}"]
        self.nv = 0
        self.nvt = 0

    def add(self, material, verts, quads, uvs=None):
        self.lines.append(f"usemtl {material}")
        for x, y, z in verts:
            self.lines.append(f"v {x:.4f} {y:.4f} {z:.4f}")
        if uvs is not None:
            for u, w in uvs:
                self.lines.append(f"vt {u:.4f} {w:.4f}")
        for q in quads:
            for tri in ((q[0], q[1], q[2]), (q[0], q[2], q[3])):
                if uvs is None:
                    self.lines.append("f " + " ".join(str(self.nv + i + 1) for i in tri))
                else:
                    self.lines.append("f " + " ".join(f"{self.nv + i + 1}/{self.nvt + i + 1}" for i in tri))
        self.nv += len(verts)
        if uvs is not None:
            self.nvt += len(uvs)

    def text(self):
        return "\n".join(self.lines) + "\n"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    tex = np.zeros((16, 16, 3), np.uint8)
    yy, xx = np.mgrid[:16, :16]
    tex[...] = np.where(((xx // 4 + yy // 4) % 2 == 0)[..., None], 165, 120)
    Image.fromarray(tex).save(OUT / "floor_tiles.png")

    W, D, H = 6.0, 5.0, 3.0
    room = ObjWriter("room.mtl")
    room.add("floor", [(0, 0, 0), (W, 0, 0), (W, D, 0), (0, D, 0)], [(0, 1, 2, 3)],
             uvs=[(0, 0), (3, 0), (3, 2.5), (0, 2.5)])
    room.add("wall", [(0, 0, 0), (W, 0, 0), (W, 0, H), (0, 0, H)], [(0, 1, 2, 3)])
    room.add("wall", [(W, 0, 0), (W, D, 0), (W, D, H), (W, 0, H)], [(0, 1, 2, 3)])
    room.add("wall", [(W, D, 0), (0, D, 0), (0, D, H), (W, D, H)], [(0, 1, 2, 3)])
    room.add("wall", [(0, D, 0), (0, 0, 0), (0, 0, H), (0, D, H)], [(0, 1, 2, 3)])
    room.add("workbench", *box(1.0, 3.6, 0.0, 3.0, 4.4, 0.9))
    room.add("cabinet", *box(4.8, 4.4, 0.0, 5.6, 4.9, 1.8))
    (OUT / "room.obj").write_text(room.text())
    (OUT / "room.mtl").write_text(
        mtl_block("floor", "floor_tiles.png") + mtl_block("wall") + mtl_block("workbench") + mtl_block("cabinet"))

    tools = {
        "power_supply": (0.30, 0.20, 0.15),
        "oscilloscope": (0.36, 0.26, 0.20),
        "clamp": (0.16, 0.08, 0.10),
        "screwdriver": (0.20, 0.03, 0.03),
        "multimeter": (0.10, 0.18, 0.05),
    }
    (OUT / "tools.mtl").write_text("".join(mtl_block(n) for n in tools))
    for name, (sx, sy, sz) in tools.items():
        obj = ObjWriter("tools.mtl")
        obj.add(name, *box(-sx / 2, -sy / 2, 0.0, sx / 2, sy / 2, sz))
        (OUT / f"{name}.obj").write_text(obj.text())


if __name__ == "__main__":
    main()
