"""Learning to localize overlapping objects from per-image counts."""

from .blobs import CPM, extract_blobs, label_blobs
from .config import ConfigError, ExperimentConfig, load_config
from .curriculum import (CurriculumState, resume, run_looc, run_topk,
                         train_glance, train_supervised)
from .data import (CountsOnlyScene, CountsOnlySplit, DatasetFormatError,
                   DatasetSplit, Scene, generate_scene, generate_split,
                   read_counts_only, read_dataset, write_dataset)
from .loss import (BACKGROUND, FOREGROUND, UNLABELED, PseudoPointSet,
                   RegionPartition, lcfcn_loss)
from .localizer import (GlanceModel, LocalizerModel, TrainingDiverged,
                        forward, glance_count, load_checkpoint,
                        save_checkpoint, train_step)
from .metrics import (EvalResult, audit_pseudo_labels, evaluate_glance,
                      evaluate_localizer, game, mae)
from .proposals import Proposal, ProposalSet, generate_proposals, iou, nms
from .pseudolabel import (ScoredProposalSet, build_partition,
                          score_proposals, select_pseudo_labels)

__version__ = "0.1.0"
