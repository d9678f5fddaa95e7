"""oodlab: adversarial robustness laboratory for OOD detection scores."""

from .attacks import AttackConfig, AttackTrajectory, attack_step, run_attack, run_attack_lowres
from .data import (
    EmbeddingDataset,
    LabeledDataset,
    SyntheticSpec,
    generate_synthetic,
    load_cifar_binary,
    load_embeddings,
    resize_adjoint,
    resize_bilinear,
    save_embeddings,
)
from .detectors import (
    DetectorEnsemble,
    GaussianDetector,
    MahalanobisScorer,
    MspScorer,
    ClipScorer,
    OodScore,
    RelativeMahalanobisScorer,
    clip_score,
    ensemble_score,
    fit_gaussians,
    md_score,
    msp_score,
    rmd_score,
    score_embedding_gradient,
)
from .evaluation import (
    DeltaReport,
    RobustnessCurve,
    auroc,
    delta_report,
    interpolate_score,
    robustness_curve,
)
from .model import (
    EmbeddingModel,
    TrainConfig,
    WordBank,
    build_word_bank,
    clip_style_logits,
    embed,
    input_gradient,
    predict_probs,
    train,
)
from .numerics import SpdFactor, cholesky, input_gradient_check, quadratic_form, spd_solve

__version__ = "0.1.0"
