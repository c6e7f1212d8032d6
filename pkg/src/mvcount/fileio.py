"""Text file formats: calibration, scene config, annotations, pipeline config.

Calibration file grammar (one block per camera, blank lines and '#' comments
ignored)::

    camera <id>
    size <image_width> <image_height>
    intrinsics <fx> <fy> <cx> <cy>
    R <r00> <r01> <r02> <r10> <r11> <r12> <r20> <r21> <r22>   # row-major
    T <tx> <ty> <tz>                                          # mm

Scene config file::

    h_avg <mm>
    origin <world_x> <world_y>      # of ground cell (0, 0) center, mm
    cell_size <mm>
    grid <width> <height>           # columns, rows

Annotation file: one line per person ::

    <world_x> <world_y> <camID> <u> <v> | <camID> - ...

where ``-`` marks a camera in which the person's head is not visible.
"""

from __future__ import annotations

import json

import numpy as np

from .density import AnnotationSet, PersonRecord
from .geometry import CameraModel, SceneConfig


def _significant(x: float) -> str:
    return f"{x:.10g}"


def save_calibration(path, cameras: list) -> None:
    lines = ["# mvcount calibration file"]
    for cam in cameras:
        lines.append(f"camera {cam.cam_id}")
        lines.append(f"size {cam.image_width} {cam.image_height}")
        lines.append(
            "intrinsics "
            + " ".join(_significant(v) for v in (cam.fx, cam.fy, cam.cx, cam.cy))
        )
        lines.append("R " + " ".join(f"{v:.17g}" for v in cam.R.ravel()))
        lines.append("T " + " ".join(f"{v:.17g}" for v in cam.T))
        lines.append("")
    with open(path, "w") as f:
        f.write("\n".join(lines))


def load_calibration(path) -> list:
    cameras = []
    block: dict = {}

    def flush():
        if not block:
            return
        missing = {"id", "size", "intrinsics", "R", "T"} - set(block)
        if missing:
            raise ValueError(f"calibration block for {block.get('id', '?')} missing {sorted(missing)}")
        fx, fy, cx, cy = block["intrinsics"]
        w, h = block["size"]
        cameras.append(
            CameraModel(
                cam_id=block["id"],
                fx=fx,
                fy=fy,
                cx=cx,
                cy=cy,
                R=np.array(block["R"]).reshape(3, 3),
                T=np.array(block["T"]),
                image_width=int(w),
                image_height=int(h),
            )
        )

    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split()
            if key == "camera":
                flush()
                block = {"id": rest[0]}
            elif key in ("size", "intrinsics", "R", "T"):
                block[key] = [float(v) for v in rest]
            else:
                raise ValueError(f"unknown calibration key {key!r}")
    flush()
    return cameras


def save_scene_config(path, scene: SceneConfig) -> None:
    with open(path, "w") as f:
        f.write("# mvcount scene config\n")
        f.write(f"h_avg {_significant(scene.h_avg)}\n")
        f.write(f"origin {_significant(scene.origin_x)} {_significant(scene.origin_y)}\n")
        f.write(f"cell_size {_significant(scene.cell_size)}\n")
        f.write(f"grid {scene.grid_width} {scene.grid_height}\n")


def load_scene_config(path) -> SceneConfig:
    vals: dict = {}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, *rest = line.split()
            vals[key] = [float(v) for v in rest]
    return SceneConfig(
        h_avg=vals["h_avg"][0],
        origin_x=vals["origin"][0],
        origin_y=vals["origin"][1],
        cell_size=vals["cell_size"][0],
        grid_width=int(vals["grid"][0]),
        grid_height=int(vals["grid"][1]),
    )


def save_annotations(path, annotations: AnnotationSet, cam_ids: list) -> None:
    lines = []
    for p in annotations.persons:
        parts = [f"{p.x:.6f}", f"{p.y:.6f}"]
        for cid in cam_ids:
            head = p.heads.get(cid)
            if head is None:
                parts.append(f"{cid} -")
            else:
                parts.append(f"{cid} {head[0]:.6f} {head[1]:.6f}")
        lines.append(" ".join(parts))
    with open(path, "w") as f:
        f.write("\n".join(lines))
        if lines:
            f.write("\n")


def load_annotations(path) -> AnnotationSet:
    persons = []
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            person = PersonRecord(x=float(tok[0]), y=float(tok[1]))
            i = 2
            while i < len(tok):
                cid = tok[i]
                if tok[i + 1] == "-":
                    person.heads[cid] = None
                    i += 2
                else:
                    person.heads[cid] = (float(tok[i + 1]), float(tok[i + 2]))
                    i += 3
            persons.append(person)
    return AnnotationSet(persons)


def save_pipeline_config(path, config: dict) -> None:
    with open(path, "w") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")


def load_pipeline_config(path) -> dict:
    with open(path) as f:
        return json.load(f)
