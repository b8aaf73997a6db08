"""Continual segmentation across data sites.

A desk-scale, framework-free library for studying sequential multi-site
training: gradient-alignment optimizers (exact and first-order meta
variants), diffusion-based generative replay steered by per-site learnable
prompts, and retention/generalization metrics over synthetic segmentation
streams.
"""

from .errors import (
    AuditError,
    DegenerateInputError,
    LayoutError,
    MetricUndefinedError,
    NumericError,
    SiteStreamError,
    ValidationError,
)
from .tensor_core import (
    AdamState,
    GradVector,
    ParamVector,
    Rng,
    Tensor,
    axpy,
    cosine,
    dot,
    norm,
)
from .synth_sites import (
    Batch,
    SiteBundle,
    SiteDataset,
    SiteStream,
    SiteStyle,
    load_site_dataset,
    load_stream,
    make_site,
    make_stream,
    save_site_dataset,
    save_stream,
    split_dataset,
    virtual_split,
)
from .model_zoo import (
    DenoiserConfig,
    DenoiserModel,
    LossValue,
    SegConfig,
    SegModel,
    denoiser_loss_and_grads,
    load_params,
    predict_masks,
    save_params,
    seg_loss_and_grad,
    time_embedding,
)
from .alignment_optim import (
    AlignConfig,
    StepDiagnostics,
    ablation_step,
    alignment_gradient,
    dual_meta_step,
    finetune_step,
    hvp,
    naive_dual_step,
    pga_exact_step,
)
from .smd_replay import (
    DiffusionConfig,
    NoiseSchedule,
    PromptEmbedding,
    ReplayBuffer,
    build_buffer,
    fixed_prompt_baseline,
    forward_diffuse,
    load_prompts,
    new_prompt,
    sample_replay,
    save_prompts,
    train_smd,
)
from .metrics import AccuracyMatrix, asd, bwt, bwt_plus, dsc, fwt
from .harness import (
    ComparisonResult,
    ExperimentConfig,
    RunRecord,
    SegTrainConfig,
    default_config,
    diagnostics_export,
    run_comparison,
    run_sequence,
    write_run_outputs,
)

__version__ = "0.1.0"
