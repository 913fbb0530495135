"""prunekit: structural compression toolkit for toy multimodal decoder LMs.

Submodules: tensor (autodiff engine), model (the toy MLLM), data (synthetic
tasks), importance (BI + Taylor scoring), pruning (plans + surgery),
accounting (params/FLOPs), recovery (losses, LoRA, training), evaluation,
checkpoint, advisor, cli.
"""

__version__ = "0.1.0"

from .model import Model, ModelConfig, Triplet, forward, init  # noqa: F401,E402
from .pruning import Floors, PrunePlan, PruneResult, execute, plan  # noqa: F401,E402
from .recovery import RecoveryConfig, TeacherConfig, train, train_teacher  # noqa: F401,E402
from .advisor import Recommendation, Scenario, recommend  # noqa: F401,E402
