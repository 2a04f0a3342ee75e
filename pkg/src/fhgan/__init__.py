"""Identity-preserving face hallucination: a sparse-aggregation SR generator,
WGAN-GP critic, ArcFace recognizer and the composite training loss."""

__version__ = "0.1.0"

from .topology import (
    AggregationPlan,
    BlockSpec,
    NetworkSpec,
    build_plan,
    bottleneck_input_channels,
    depth_accounting,
    layer_input_channels,
    parameter_count,
    predecessors,
)
from .generator import DSNet, SparseBlock
from .critic import Critic, critic_loss, gradient_penalty, interpolate
from .recognizer import ArcFaceConfig, FaceRecognizer, arcface_loss, cosine_similarity, fr_batch_loss
from .losses import (
    FeatureExtractor,
    LossBreakdown,
    LossWeights,
    adversarial_g_term,
    identity_loss,
    perceptual_loss,
    pixel_loss,
    total_loss,
)
from .config import RunConfig, desk_config, load_config
from .engine import Trainer, load_checkpoint, lr_schedule, save_checkpoint
from .metrics import MetricReport, evaluate_sr, psnr, ssim, verification_accuracy
