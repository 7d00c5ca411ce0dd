"""Token sequences: features plus point provenance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.tensor import Tensor

PAD_ID = -1


@dataclass
class TokenSequence:
    """An (N, D) feature block with per-token point identity.

    `point_ids` holds the global id of the scene point behind each token
    (PAD_ID for zero padding). `frame_ids` keeps per-token frame
    provenance so tokens stay traceable after sequences from different
    frames are fused; for single-frame sequences it is just `frame_index`
    repeated.
    """

    features: Tensor
    point_ids: np.ndarray
    frame_index: int = 0
    frame_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.point_ids = np.asarray(self.point_ids, dtype=np.int64)
        if self.features.data.shape[0] != self.point_ids.shape[0]:
            raise ValueError("features rows != point_ids length")
        if self.frame_ids is None:
            self.frame_ids = np.where(
                self.point_ids == PAD_ID, PAD_ID, self.frame_index
            ).astype(np.int64)
        else:
            self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)

    def __len__(self):
        return self.point_ids.shape[0]

    @property
    def valid_mask(self):
        return self.point_ids != PAD_ID

    def select(self, idx, frame_index=None):
        from .nn import tensor as T

        idx = np.asarray(idx, dtype=np.int64)
        return TokenSequence(
            features=T.gather_rows(self.features, idx),
            point_ids=self.point_ids[idx],
            frame_index=self.frame_index if frame_index is None else frame_index,
            frame_ids=self.frame_ids[idx],
        )
