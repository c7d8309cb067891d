"""Paired occluded/clean capture protocol.

A pair holds two renders of the same ground truth: one with occluders
active ("object in hand") and one with the occlusion spec zeroed ("object
removed").  Both share the ground truth annotated from the clean branch.
Batch assembly supports the three training arms: matched pairs (each
occluded record with its own clean twin), random pairing (records drawn at
random per step), and plain single-branch batches at doubled size.

The pair store is a JSON-lines file, one pair per line, canonical JSON
(sorted keys, 9-significant-digit floats) so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .hand_model import HandParams, SkeletonTemplate
from .synth_oracle import DetectorModel, OcclusionSpec, SceneRecord, render_detections
from .jsonio import canonical_dumps

SCHEMA_VERSION = 1


@dataclass
class SiamesePair:
    """Occluded + clean records sharing one ground truth."""

    pair_id: int
    occluded: SceneRecord
    clean: SceneRecord
    gt_params: HandParams
    gt_joints: np.ndarray            # (21, 3) mm
    occlusion_spec: OcclusionSpec
    grasp_label: int | None = None   # optional canonical grasp-taxonomy tag

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "pair_id": self.pair_id,
            "occluded": self.occluded.to_dict(),
            "clean": self.clean.to_dict(),
            "gt_params": self.gt_params.to_dict(),
            "gt_joints_mm": self.gt_joints.tolist(),
            "occlusion_spec": self.occlusion_spec.to_dict(),
            "grasp_label": self.grasp_label,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SiamesePair":
        return cls(
            pair_id=int(d["pair_id"]),
            occluded=SceneRecord.from_dict(d["occluded"]),
            clean=SceneRecord.from_dict(d["clean"]),
            gt_params=HandParams.from_dict(d["gt_params"]),
            gt_joints=np.array(d["gt_joints_mm"]),
            occlusion_spec=OcclusionSpec.from_dict(d["occlusion_spec"]),
            grasp_label=d.get("grasp_label"),
        )


def make_pair(
    gt: HandParams,
    rig: list,
    template: SkeletonTemplate,
    detector: DetectorModel,
    occ_spec: OcclusionSpec,
    rng: np.random.Generator,
    pair_id: int = 0,
    grasp_label: int | None = None,
) -> SiamesePair:
    """Render the occluded branch with the spec active, then the clean twin.

    Same ground truth and cameras, independent noise draws per branch.
    """
    occluded = render_detections(gt, rig, template, detector, occ_spec, rng)
    clean = render_detections(gt, rig, template, detector, occ_spec.zeroed(), rng)
    return SiamesePair(
        pair_id=pair_id,
        occluded=occluded,
        clean=clean,
        gt_params=gt,
        gt_joints=occluded.joints,
        occlusion_spec=occ_spec,
        grasp_label=grasp_label,
    )


def validate_pair(pair: SiamesePair, alignment_tol_px: float = 5.0) -> list:
    """Pair integrity check; returns a list of violation strings (empty = ok).

    Checks ground-truth equality across branches, the occlusion-flag
    asymmetry (clean branch must carry none; occluded branch must carry
    flags or a declared spec), and pixel agreement of jointly visible
    joints between the branches, the stand-in for checking that the hand
    held still between the two captures.
    """
    violations = []
    for name, rec in (("occluded", pair.occluded), ("clean", pair.clean)):
        if not (
            np.array_equal(rec.params.theta, pair.gt_params.theta)
            and np.array_equal(rec.params.gamma, pair.gt_params.gamma)
            and np.array_equal(rec.params.phi, pair.gt_params.phi)
        ):
            violations.append(f"gt-mismatch:{name}-params")
        if not np.array_equal(rec.joints, pair.gt_joints):
            violations.append(f"gt-mismatch:{name}-joints")
    if pair.clean.occluded.size and np.any(pair.clean.occluded):
        violations.append("clean-has-occlusion")
    has_flags = pair.occluded.occluded.size and np.any(pair.occluded.occluded)
    declared = pair.occlusion_spec.n_lines > 0 or pair.occlusion_spec.n_circles > 0
    if not has_flags and not declared:
        violations.append("occluded-branch-has-no-occlusion")

    clean_views = {o.view_index: i for i, o in enumerate(pair.clean.observations)}
    for vi, obs_occ in enumerate(pair.occluded.observations):
        ci = clean_views.get(obs_occ.view_index)
        if ci is None:
            continue
        obs_clean = pair.clean.observations[ci]
        both_visible = ~pair.occluded.occluded[vi]
        if pair.clean.occluded.size:
            both_visible &= ~pair.clean.occluded[ci]
        drift = np.linalg.norm(obs_occ.pixels - obs_clean.pixels, axis=1)
        for k in np.flatnonzero(both_visible & (drift > alignment_tol_px)):
            violations.append(f"alignment:view={obs_occ.view_index},joint={k}")
    return violations


def save_pairs(pairs, path) -> None:
    with open(path, "w") as fh:
        for pair in pairs:
            fh.write(canonical_dumps(pair.to_dict()))
            fh.write("\n")


def load_pairs(path) -> list:
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(SiamesePair.from_dict(json.loads(line)))
    return pairs


# -- batch assembly ----------------------------------------------------------

@dataclass
class PairBatch:
    """One training step's worth of data for up to two branches."""

    pair_ids: list
    inputs_a: np.ndarray
    targets_a: np.ndarray
    inputs_b: np.ndarray | None
    targets_b: np.ndarray | None
    mode: str


def record_input(record: SceneRecord, views=(0,)) -> np.ndarray:
    """Lifting-network input: per joint (u/W, v/H, confidence) per chosen view."""
    chunks = []
    by_index = {o.view_index: o for o in record.observations}
    for v in views:
        obs = by_index[v]
        intr = obs.camera.intrinsics
        scaled = np.column_stack(
            [obs.pixels[:, 0] / intr.width, obs.pixels[:, 1] / intr.height, obs.confidence]
        )
        chunks.append(scaled.ravel())
    return np.concatenate(chunks)


def record_target(record: SceneRecord) -> np.ndarray:
    """Root-relative ground-truth joints, flattened (63,), mm."""
    return (record.joints - record.joints[0]).ravel()


def pair_target(pair: SiamesePair) -> np.ndarray:
    """The shared target both branches train against."""
    return (pair.gt_joints - pair.gt_joints[0]).ravel()


def assemble_batches(
    pairs: list,
    batch_size: int,
    mode: str,
    rng: np.random.Generator,
    views=(0,),
):
    """Yield one epoch of PairBatch objects in the requested pairing mode.

    ``siamese`` iterates a fresh shuffle of the pairs, each occluded record
    with its own clean twin; ``random-pair`` draws records (occluded and
    clean pooled) uniformly at random per step, targets following each
    record; ``single`` flattens the pool into one branch at doubled batch
    size.  Every mode yields len(pairs) // batch_size steps per epoch, so
    one epoch sees the same sample count in all modes.
    """
    if not pairs:
        raise ValueError("empty pair dataset")
    if batch_size > len(pairs):
        raise ValueError("batch size exceeds pair count")
    if mode not in ("siamese", "random-pair", "single"):
        raise ValueError(f"unknown pairing mode {mode!r}")

    inputs_occ = np.stack([record_input(p.occluded, views) for p in pairs])
    inputs_clean = np.stack([record_input(p.clean, views) for p in pairs])
    targets = np.stack([pair_target(p) for p in pairs])
    ids = [p.pair_id for p in pairs]
    n = len(pairs)
    steps = n // batch_size

    if mode == "siamese":
        order = rng.permutation(n)
        for s in range(steps):
            sel = order[s * batch_size:(s + 1) * batch_size]
            yield PairBatch(
                pair_ids=[ids[i] for i in sel],
                inputs_a=inputs_occ[sel],
                targets_a=targets[sel],
                inputs_b=inputs_clean[sel],
                targets_b=targets[sel],
                mode=mode,
            )
        return

    pool_inputs = np.concatenate([inputs_occ, inputs_clean])
    pool_targets = np.concatenate([targets, targets])
    pool_ids = ids + ids

    if mode == "random-pair":
        for _ in range(steps):
            sel_a = rng.integers(0, 2 * n, size=batch_size)
            sel_b = rng.integers(0, 2 * n, size=batch_size)
            yield PairBatch(
                pair_ids=[pool_ids[i] for i in sel_a],
                inputs_a=pool_inputs[sel_a],
                targets_a=pool_targets[sel_a],
                inputs_b=pool_inputs[sel_b],
                targets_b=pool_targets[sel_b],
                mode=mode,
            )
        return

    order = rng.permutation(2 * n)
    for s in range(steps):
        sel = order[s * 2 * batch_size:(s + 1) * 2 * batch_size]
        yield PairBatch(
            pair_ids=[pool_ids[i] for i in sel],
            inputs_a=pool_inputs[sel],
            targets_a=pool_targets[sel],
            inputs_b=None,
            targets_b=None,
            mode=mode,
        )
