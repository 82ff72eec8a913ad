"""Zero-shot text-guided image outpainting with LLM caption guidance.

A square window grows into a wide canvas by repeated shift-and-inpaint
steps: each step masks the strip beyond the current edge, conditions a small
latent diffusion denoiser on a global caption, an LLM-written local caption,
and visual tokens of the canvas so far, and composites the generated strip.
"""

from .backends import (
    HttpBackend,
    LLMBackend,
    RecordingBackend,
    StubBackend,
    TextOnlyStub,
    TranscriptBackend,
    make_backend,
)
from .canvas import (
    Canvas,
    Direction,
    MaskedImage,
    build_step_input,
    canvas_extent,
    composite,
    edge_window,
    extract_unmasked,
    image_digest,
    load_png,
    make_training_masks,
    mask_edge,
    masked_width,
    save_png,
)
from .captions import (
    Caption,
    CaptionKind,
    CaptionRecord,
    build_caption_record,
    imagine_local_captions,
    inference_local_caption,
    summarize_to_global,
)
from .conditioning import (
    AblationFlags,
    Conditioner,
    FusionMLP,
    TokenEmbeddings,
    build_context,
    encode_text,
    encode_visual,
)
from .config import FULL_SCALE_REFERENCE, RunConfig
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    LatentCodec,
    NoiseSchedule,
    add_noise,
    noise_prediction_loss,
    sample_inpaint,
    train_step,
)
from .encoders import HashTextEncoder, PatchVisionEncoder
from .estimator import LLMGuidedOutpainter
from .metrics import (
    MetricReport,
    PixelClassifier,
    clip_similarity,
    compare_runs,
    inception_score,
)
from .pipeline import (
    ExpansionState,
    TrainingRecord,
    build_models,
    continue_expansion,
    expand,
    load_state,
    make_synthetic_pairs,
    prepare_dataset,
    replay,
    save_state,
    train,
)
from .validation import (
    BackendError,
    CapabilityError,
    ConfigurationError,
    ExpansionError,
    GeometryError,
    ProtocolError,
    TrainingError,
    ValidationError,
)

__version__ = "0.1.0"
