"""The trained ensemble produced by the residual pipeline."""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import ShapeError
from .net import Mlp


@dataclass
class StageRecord:
    stage: int
    val_energy: float
    train_accuracy: float
    val_accuracy: float
    mean_l2_to_teacher: float

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class StageArtifact:
    teacher: Mlp
    s0: Mlp
    res_students: List[Mlp]
    th_energy: float
    termination: str = "energy"  # or "stage_cap"
    records: List[StageRecord] = field(default_factory=list)
    teacher_val_energy: Optional[float] = None
    val_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        nets = [self.teacher, self.s0, *self.res_students]
        if len({(m.in_dim, m.out_dim) for m in nets}) != 1:
            raise ShapeError("teacher, student and res-students must share input/output sizes")

    @property
    def n(self):
        return len(self.res_students)

    @property
    def num_classes(self):
        return self.teacher.out_dim

    def stage_net(self, i):
        """Network trained at stage ``i``: S0 for 0, R_i otherwise."""
        return self.s0 if i == 0 else self.res_students[i - 1]
