"""On-disk dataset: scenes, rendered depth frames, annotations and a manifest."""
from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DataError, SettleError
from .models import load_model
from .render import read_annotation, read_depth, render_frame, write_annotation, write_depth
from .scenegen import fit_spheres, generate_scene, sample_views, scene_to_dict

MANIFEST = "manifest.json"
SPLITS = ("train", "test")


def scene_seed(seed, split, index):
    """Independent integer seed per (run seed, split, scene index)."""
    ss = np.random.SeedSequence([seed, SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _scene_name(split, index):
    return f"{split}_{index:05d}"


def _generate_one(args):
    cfg, split, index, out_dir = args
    model = load_model(dataclasses.asdict(cfg.model))
    spheres = fit_spheres(model, cfg.scene.n_spheres)
    seed = scene_seed(cfg.seed, split, index)
    scene_cfg = dataclasses.replace(cfg.scene, seed=seed)
    try:
        instances = generate_scene(scene_cfg, model, spheres)
    except SettleError as exc:
        raise SettleError(f"{split} scene {index}: {exc}") from exc
    views = sample_views(cfg.scene.bin_half_extents, cfg.views.count, seed, cfg.views)
    name = _scene_name(split, index)
    scene_path = os.path.join("scenes", f"scene_{name}.json")
    with open(os.path.join(out_dir, scene_path), "w") as fh:
        json.dump(scene_to_dict(instances, views, {"seed": seed, "split": split}), fh,
                  indent=1, sort_keys=True)
        fh.write("\n")
    frames = []
    for v, view in enumerate(views):
        render_cfg = dataclasses.replace(cfg.render, noise_seed=seed * 100 + v)
        image, annotation, _ = render_frame(instances, view, model, render_cfg)
        depth_path = os.path.join("frames", f"{name}_view_{v:02d}.bpd")
        ann_path = os.path.join("frames", f"{name}_view_{v:02d}.json")
        write_depth(os.path.join(out_dir, depth_path), image)
        write_annotation(os.path.join(out_dir, ann_path), annotation)
        frames.append({"id": f"{name}_view_{v:02d}", "depth": depth_path,
                       "annotation": ann_path})
    return {"scene": scene_path, "split": split, "index": index, "seed": seed,
            "instances": len(instances), "frames": frames}


def generate_dataset(cfg, out_dir, workers=1):
    """Write scenes, frames and the manifest; output bytes depend only on cfg."""
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    jobs = [(cfg, split, i, out_dir)
            for split, n in (("train", cfg.dataset.train_scenes), ("test", cfg.dataset.test_scenes))
            for i in range(n)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_generate_one, jobs))
    else:
        entries = [_generate_one(job) for job in jobs]
    manifest = {"seed": cfg.seed, "config_hash": cfg.section_hash(), "scenes": entries,
                "counts": {s: sum(e["split"] == s for e in entries) for s in SPLITS}}
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


@dataclass
class Frame:
    id: str
    split: str
    image: object
    annotation: object


class Dataset:
    """Manifest-backed view of a generated dataset."""

    def __init__(self, root, cfg=None):
        self.root = root
        path = os.path.join(root, MANIFEST)
        try:
            with open(path) as fh:
                self.manifest = json.load(fh)
        except OSError as exc:
            raise DataError(f"no dataset manifest at {path}") from exc
        if cfg is not None and self.manifest["config_hash"] != cfg.section_hash():
            raise DataError(f"{path}: config hash does not match the current configuration")
        for entry in self.manifest["scenes"]:
            for f in entry["frames"]:
                for key in ("depth", "annotation"):
                    if not os.path.exists(os.path.join(root, f[key])):
                        raise DataError(f"missing dataset file {f[key]}")

    def frame_ids(self, split=None):
        return [f["id"] for e in self.manifest["scenes"] if split in (None, e["split"])
                for f in e["frames"]]

    def frames(self, split=None, scenes=None):
        """Load frames of a split, optionally only the first ``scenes`` scenes."""
        out = []
        entries = [e for e in self.manifest["scenes"] if split in (None, e["split"])]
        for e in entries[:scenes]:
            for f in e["frames"]:
                out.append(Frame(f["id"], e["split"], read_depth(os.path.join(self.root, f["depth"])),
                                 read_annotation(os.path.join(self.root, f["annotation"]))))
        return out
