"""Ground-truth keypoint correspondence between two positive slices.

For each real keypoint on slice i, candidates on slice j are those within
a Manhattan-distance threshold; the match is the candidate with the
smallest descriptor L2 distance.  Keypoints with no candidate, and slice-j
keypoints never selected, land in the unmatched sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .keypoints import KeypointSet


@dataclass
class MatchLabels:
    """Match pairs and unmatched index sets, in keypoint-index space.

    Many-to-one matches are allowed: several slice-i keypoints may select
    the same slice-j keypoint.
    """

    matches: list[tuple[int, int]] = field(default_factory=list)
    unmatched_i: set[int] = field(default_factory=set)
    unmatched_j: set[int] = field(default_factory=set)

    def __post_init__(self):
        rows = [a for a, _ in self.matches]
        if len(set(rows)) != len(rows):
            raise ValueError("a slice-i keypoint appears in more than one match")
        if set(rows) & self.unmatched_i:
            raise ValueError("matched slice-i keypoints also marked unmatched")
        cols = {b for _, b in self.matches}
        if cols & self.unmatched_j:
            raise ValueError("matched slice-j keypoints also marked unmatched")

    def matched_i(self) -> set[int]:
        return {a for a, _ in self.matches}

    def matched_j(self) -> set[int]:
        return {b for _, b in self.matches}


def build_labels(
    set_i: KeypointSet, set_j: KeypointSet, manhattan_threshold: float
) -> MatchLabels:
    """Label correspondences between two positive slices' keypoints.

    Synthetic backfill keypoints carry no descriptor signal and are
    excluded from every set.
    """
    if manhattan_threshold <= 0:
        raise ValueError("manhattan_threshold must be positive")
    real_i = np.flatnonzero(set_i.real_mask())
    real_j = np.flatnonzero(set_j.real_mask())
    if len(real_j) == 0:
        return MatchLabels(
            matches=[],
            unmatched_i={int(set_i.indices[r]) for r in real_i},
            unmatched_j=set(),
        )
    # keep slice-j columns in ascending index order: argmin then breaks
    # descriptor-distance ties toward the smaller index
    real_j = real_j[np.argsort(set_j.indices[real_j])]
    pos_i = set_i.positions[real_i]
    pos_j = set_j.positions[real_j]
    manhattan = np.abs(pos_i[:, None, :] - pos_j[None, :, :]).sum(axis=2)
    eligible = manhattan <= manhattan_threshold
    diff = set_i.descriptors[real_i][:, None, :] - set_j.descriptors[real_j][None, :, :]
    desc_dist = np.sqrt((diff ** 2).sum(axis=2))
    desc_dist[~eligible] = np.inf

    matches: list[tuple[int, int]] = []
    unmatched_i: set[int] = set()
    selected_j: set[int] = set()
    for r, row in enumerate(real_i):
        a = int(set_i.indices[row])
        if not eligible[r].any():
            unmatched_i.add(a)
            continue
        b_col = int(np.argmin(desc_dist[r]))
        b = int(set_j.indices[real_j[b_col]])
        matches.append((a, b))
        selected_j.add(b)
    unmatched_j = {int(set_j.indices[c]) for c in real_j} - selected_j
    return MatchLabels(matches=matches, unmatched_i=unmatched_i, unmatched_j=unmatched_j)
