"""Small-object detector: a YOLOv5-style network with a stride-4 head, CBAM and involution,
built on a numpy reverse-mode autodiff core."""
from .anchors import AnchorSet, best_possible_recall, check_or_regenerate, kmeans_anchors
from .boxes import Box, Detection, box_iou, ciou_loss, decode, encode, iou, nms
from .data import LabeledImage, center_crop, compute_stats, hsv_jitter, load_visdrone, make_synthetic
from .errors import ConfigError, ConfigHashError, DataError, FormatError, HicError, NumericError, ShapeError
from .kernels import available_backends, set_backend
from .loss import LossWeights, assign, compute_loss
from .metrics import average_precision, evaluate, match, precision_recall
from .model import HICModel, ModelConfig, build, count_parameters, load_checkpoint, save_checkpoint
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"
