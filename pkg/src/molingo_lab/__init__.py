"""Desk-scale text-to-motion lab.

Pipeline: synthetic labeled corpora -> causal-conv motion autoencoder
(AE/VAE/SAE) -> masked auto-regressive rectified-flow generator with
cross-attention text conditioning -> iterative masked sampler with CFG ->
contrastive evaluator and metric suite.
"""

__version__ = "0.1.0"

from .autoencoder import (
    AutoencoderConfig,
    ClassTokenSequence,
    LatentSequence,
    MotionAutoencoder,
    build_autoencoder,
    class_tokens,
    filter_repetitive,
    kl_loss,
    recon_loss,
    semantic_loss,
)
from .corpus_io import read_corpus, write_corpus
from .evaluation import (
    ContrastiveEvaluator,
    EvaluatorBundle,
    EvaluatorConfig,
    MetricReport,
    clip_score,
    evaluate_run,
    fid,
    mmodality,
    mpjpe,
    r_precision_and_matching,
    rfid,
)
from .generator import (
    FlowHead,
    GeneratorConfig,
    MotionGenerator,
    flow_interpolate,
    flow_loss,
    flow_target,
    mask_latents,
)
from .motion import (
    GUO67_SPEC,
    TOY_SPEC,
    JointTrajectory,
    Layout,
    MotionSequence,
    NormalizationStats,
    RepresentationSpec,
    compute_stats,
    denormalize,
    from_joint_positions,
    normalize,
    to_joint_positions,
)
from .pipeline import AutoencoderBundle, GeneratorBundle
from .sampler import SampleConfig, build_schedule, cfg_velocity, denoise_positions, generate
from .synthetic import MotionCell, SynthSpec, default_cells, synth_corpus
from .text_encoding import TextAdapter, ToyTextEncoder, export_embeddings, import_embeddings
from .training import TrainParams, train_autoencoder, train_evaluator, train_generator
