"""End-to-end flows: dataset preparation, training, and the autoregressive
expansion loop, plus replay/resume plumbing.

Conventions enforced here rather than in the lower modules:
  * training records pair each image with its dataset caption as the local
    caption and the summarized caption as the global one, four records per
    image (one per edge);
  * the visual encoder sees the kept strip of the masked window during
    training but the entire canvas so far during inference;
  * all randomness derives from one master seed hashed with its role and
    step index, so interrupted runs resume on the exact trajectory.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backends import LLMBackend
from .canvas import (
    Canvas,
    Direction,
    build_step_input,
    composite,
    edge_window,
    extract_unmasked,
    image_digest,
    load_png,
    mask_edge,
    masked_width,
    save_png,
)
from .captions import Caption, CaptionKind, build_caption_record, inference_local_caption
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .conditioning import (
    AblationFlags,
    Conditioner,
    TokenEmbeddings,
    SOURCE_LOCAL,
    build_context,
    encode_text,
    encode_visual,
)
from .config import RunConfig
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    LatentCodec,
    NoiseSchedule,
    sample_inpaint,
    train_step,
)
from .encoders import HashTextEncoder, PatchVisionEncoder
from .validation import (
    BackendError,
    ExpansionError,
    TrainingError,
    ValidationError,
    check_square_image,
)

RECORDS_NAME = "records.jsonl"
IMAGES_DIRNAME = "images"


def derive_seed(master: int, *parts) -> int:
    """Stable 63-bit seed from the master seed plus a role/index path."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "big") >> 1


# ---------------------------------------------------------------------------
# dataset preparation


@dataclass(frozen=True)
class TrainingRecord:
    """One (image, direction) training sample in the record store."""

    image_ref: str
    direction: str
    ratio: tuple[int, int]
    global_caption: str
    local_caption: str
    provenance: dict

    def to_json(self) -> str:
        payload = {
            "image_ref": self.image_ref,
            "direction": self.direction,
            "ratio": list(self.ratio),
            "global_caption": self.global_caption,
            "local_caption": self.local_caption,
            "provenance": self.provenance,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrainingRecord":
        data = json.loads(line)
        return cls(
            image_ref=data["image_ref"],
            direction=data["direction"],
            ratio=tuple(data["ratio"]),
            global_caption=data["global_caption"],
            local_caption=data["local_caption"],
            provenance=data.get("provenance", {}),
        )


_SYNTH_HUES = ["red", "orange", "yellow", "green", "cyan", "blue", "violet", "gray"]
_SYNTH_SHAPES = ["disk", "square", "stripe", "ring"]


def make_synthetic_pairs(out_dir, count: int, size: int = 32, seed: int = 0) -> Path:
    """Write a small synthetic (image, caption) directory for smoke runs.

    Layout matches what `load_pairs` expects: PNGs next to an
    annotations.jsonl of {"image": name, "caption": text} lines.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    palette = {
        "red": (0.85, 0.2, 0.2), "orange": (0.9, 0.55, 0.15), "yellow": (0.9, 0.85, 0.2),
        "green": (0.2, 0.7, 0.3), "cyan": (0.2, 0.75, 0.75), "blue": (0.25, 0.35, 0.85),
        "violet": (0.6, 0.3, 0.8), "gray": (0.5, 0.5, 0.5),
    }
    lines = []
    for index in range(count):
        rng = np.random.default_rng(derive_seed(seed, "pair", index))
        hue = _SYNTH_HUES[rng.integers(len(_SYNTH_HUES))]
        bg = _SYNTH_HUES[rng.integers(len(_SYNTH_HUES))]
        shape = _SYNTH_SHAPES[rng.integers(len(_SYNTH_SHAPES))]
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / max(size - 1, 1)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 3.0
        image = ramp[:, :, None] * np.asarray(palette[bg], dtype=np.float32)[None, None]
        cy, cx = rng.uniform(0.25, 0.75, size=2)
        radius = rng.uniform(0.15, 0.3)
        dist = np.hypot(yy - cy, xx - cx)
        if shape == "disk":
            hit = dist < radius
        elif shape == "ring":
            hit = np.abs(dist - radius) < 0.06
        elif shape == "square":
            hit = (np.abs(yy - cy) < radius) & (np.abs(xx - cx) < radius)
        else:
            hit = np.abs((yy - cy) - (xx - cx)) < 0.08
        image[hit] = palette[hue]
        image = np.clip(image, 0.0, 1.0)
        name = f"pair_{index:05d}.png"
        save_png(image, out / name)
        lines.append(json.dumps(
            {"image": name, "caption": f"a {hue} {shape} over a {bg} gradient"},
            sort_keys=True,
        ))
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n")
    return out


def load_pairs(pairs_dir) -> list[tuple[str, np.ndarray, str]]:
    """Read (name, image, annotated caption) triples from a pairs directory."""
    root = Path(pairs_dir)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise ValidationError(f"{root} has no annotations.jsonl")
    triples = []
    for line in ann.read_text().splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        name = entry["image"]
        triples.append((name, load_png(root / name), entry["caption"]))
    if not triples:
        raise ValidationError(f"{ann} lists no pairs")
    return triples


def _store_done_names(records_path: Path) -> set:
    done = set()
    if records_path.exists():
        for line in records_path.read_text().splitlines():
            if line.strip():
                done.add(TrainingRecord.from_json(line).image_ref)
    return done


def prepare_dataset(pairs, k: int, backend: LLMBackend, out_dir,
                    ratio=(1, 1), retries: int = 3, backoff: float = 0.5) -> dict:
    """Build the training record store: caption each pair, emit 4 records each.

    Append-only and restartable: pairs whose records already exist are
    skipped.  Backend failures are retried, then recorded under "skipped" in
    the returned summary (also written to summary.json) without aborting the
    rest of the run.
    """
    if not pairs:
        raise ValidationError("prepare_dataset needs at least one (image, caption) pair")
    out = Path(out_dir)
    images_dir = out / IMAGES_DIRNAME
    images_dir.mkdir(parents=True, exist_ok=True)
    records_path = out / RECORDS_NAME

    named = []
    for index, pair in enumerate(pairs):
        if len(pair) == 3:
            name, image, caption = pair
        else:
            image, caption = pair
            name = f"pair_{index:05d}.png"
        named.append((name, check_square_image(image, name), caption))

    done = _store_done_names(records_path)
    todo = [entry for entry in named if f"{IMAGES_DIRNAME}/{entry[0]}" not in done]

    def caption_one(entry):
        name, image, annotated = entry
        return build_caption_record(
            Caption(annotated, CaptionKind.ANNOTATED), k, backend, retries, backoff
        )

    results: dict[str, object] = {}
    skipped: list[dict] = []
    limit = getattr(backend, "max_concurrency", None)
    workers = max(1, min(8, len(todo) or 1) if limit is None else int(limit))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {entry[0]: pool.submit(caption_one, entry) for entry in todo}
        for name, future in futures.items():
            try:
                results[name] = future.result()
            except BackendError as exc:
                skipped.append({"image": name, "error": str(exc)})

    written = 0
    with records_path.open("a") as store:
        for name, image, annotated in todo:
            record = results.get(name)
            if record is None:
                continue
            save_png(image, images_dir / name)
            width = masked_width(image.shape[0], ratio)
            for direction in Direction:
                row = TrainingRecord(
                    image_ref=f"{IMAGES_DIRNAME}/{name}",
                    direction=direction.value,
                    ratio=tuple(ratio),
                    global_caption=record.global_caption.text,
                    local_caption=annotated,
                    provenance={
                        "backend": backend.name,
                        "imagined_locals": [c.text for c in record.imagined_locals],
                        "strip_width": width,
                    },
                )
                store.write(row.to_json() + "\n")
                written += 1

    summary = {
        "pairs": len(named),
        "already_done": len(named) - len(todo),
        "captioned": len(results),
        "skipped": sorted(skipped, key=lambda item: item["image"]),
        "records_written": written,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_records(store_dir) -> list[TrainingRecord]:
    path = Path(store_dir) / RECORDS_NAME
    if not path.exists():
        raise ValidationError(f"{store_dir} has no {RECORDS_NAME}")
    records = [TrainingRecord.from_json(line)
               for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise ValidationError(f"{path} is empty")
    return records


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class ModelBundle:
    config: RunConfig
    text_encoder: HashTextEncoder
    vision_encoder: PatchVisionEncoder
    conditioner: Conditioner
    denoiser: Denoiser
    codec: LatentCodec
    schedule: NoiseSchedule

    def parameters(self):
        return list(self.denoiser.parameters()) + list(self.conditioner.parameters())


def build_models(config: RunConfig, flags: AblationFlags | None = None) -> ModelBundle:
    """Construct every module for a run with deterministic initialization."""
    torch.manual_seed(derive_seed(config.seed, "init"))
    conditioner = Conditioner(
        tokens=config.tokens,
        embed_dim=config.embed_dim,
        mode=config.fusion_mode,
        hidden=config.hidden,
        flags=flags,
    )
    denoiser = Denoiser(DenoiserConfig(
        context_len=conditioner.context_len,
        context_dim=config.embed_dim,
        base_channels=config.base_channels,
        attn_levels=tuple(config.attn_levels),
        downsample=config.downsample,
        timesteps=config.timesteps,
    ))
    return ModelBundle(
        config=config,
        text_encoder=HashTextEncoder(tokens=config.tokens, dim=config.embed_dim),
        vision_encoder=PatchVisionEncoder(tokens=config.tokens, dim=config.embed_dim),
        conditioner=conditioner,
        denoiser=denoiser,
        codec=LatentCodec(config.downsample),
        schedule=NoiseSchedule(config.timesteps),
    )


def _bundle_from_checkpoint(checkpoint_path, flags: AblationFlags | None = None,
                            optimizer_factory=None):
    denoiser, conditioner, schedule, optimizer, meta = load_checkpoint(
        checkpoint_path, optimizer_factory
    )
    if "config" not in meta:
        raise ValidationError(f"checkpoint {checkpoint_path} carries no run config")
    config = RunConfig.from_sources(overrides=meta["config"])
    if flags is not None:
        conditioner.flags = flags
    bundle = ModelBundle(
        config=config,
        text_encoder=HashTextEncoder(tokens=config.tokens, dim=config.embed_dim),
        vision_encoder=PatchVisionEncoder(tokens=config.tokens, dim=config.embed_dim),
        conditioner=conditioner,
        denoiser=denoiser,
        codec=LatentCodec(config.downsample),
        schedule=schedule,
    )
    return bundle, optimizer, meta


# ---------------------------------------------------------------------------
# training


def _prepare_samples(records: list[TrainingRecord], store_dir, bundle: ModelBundle):
    """Precompute latents and token blocks for every record."""
    root = Path(store_dir)
    samples = []
    for record in records:
        image = load_png(root / record.image_ref)
        width = masked_width(image.shape[0], record.ratio)
        masked = mask_edge(image, Direction.parse(record.direction), width, record.ratio)
        kept_strip = extract_unmasked(masked)
        samples.append({
            "id": f"{record.image_ref}:{record.direction}",
            "latents": bundle.codec.encode(image),
            "masked_latents": bundle.codec.encode(masked.image),
            "mask_latents": bundle.codec.encode_mask(masked.mask),
            "global": torch.as_tensor(
                encode_text(Caption(record.global_caption, CaptionKind.GLOBAL),
                            bundle.text_encoder).data),
            "local": torch.as_tensor(
                encode_text(Caption(record.local_caption, CaptionKind.ANNOTATED),
                            bundle.text_encoder).data),
            "visual": torch.as_tensor(
                encode_visual(kept_strip, bundle.vision_encoder).data),
            "visual_digest": image_digest(kept_strip),
        })
    return samples


def _gather_batch(samples, indices) -> dict:
    picked = [samples[i] for i in indices]
    return {
        "ids": [s["id"] for s in picked],
        "latents": torch.stack([s["latents"] for s in picked]),
        "masked_latents": torch.stack([s["masked_latents"] for s in picked]),
        "mask_latents": torch.stack([s["mask_latents"] for s in picked]),
        "global_blocks": torch.stack([s["global"] for s in picked]),
        "local_blocks": torch.stack([s["local"] for s in picked]),
        "visual_blocks": torch.stack([s["visual"] for s in picked]),
        "visual_digests": [s["visual_digest"] for s in picked],
    }


def train(store_dir, out_dir, config: RunConfig, steps: int | None = None,
          resume=None, flags: AblationFlags | None = None, hook=None,
          checkpoint_name: str = "checkpoint.npz") -> Path:
    """Train the denoiser and fusion layers on a prepared record store.

    Writes checkpoint.npz (+ sidecar), training_log.jsonl, and the effective
    config.json into `out_dir`.  `hook(info)` fires once per step with the
    loss, the visual-encoder input digests (always the kept strips here), and
    the assembled context for instrumentation.  With `resume` pointing at an
    earlier checkpoint the run continues on the exact same trajectory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_records(store_dir)
    total_steps = config.train_steps if steps is None else int(steps)

    start_step = 0
    loss_history: list[float] = []
    if resume is not None:
        bundle, optimizer, meta = _bundle_from_checkpoint(
            resume, flags,
            optimizer_factory=lambda params: torch.optim.Adam(params, lr=config.learning_rate),
        )
        if meta.get("config") != config.to_dict():
            raise ValidationError("resume checkpoint was trained with a different config")
        start_step = int(meta.get("global_step", 0))
        loss_history = list(meta.get("loss_history", []))
    else:
        bundle = build_models(config, flags)
        optimizer = torch.optim.Adam(bundle.parameters(), lr=config.learning_rate)

    samples = _prepare_samples(records, store_dir, bundle)
    n = len(samples)
    batch = min(config.batch_size, n)
    steps_per_epoch = -(-n // batch)

    checkpoint_path = out / checkpoint_name
    config.save(out / "config.json")

    def write_checkpoint(global_step: int):
        save_checkpoint(
            checkpoint_path, bundle.denoiser, bundle.conditioner, bundle.schedule,
            optimizer=optimizer,
            meta={
                "global_step": global_step,
                "config": config.to_dict(),
                "loss_history": loss_history,
                "records": n,
            },
        )

    log_path = out / "training_log.jsonl"
    with log_path.open("a" if resume is not None else "w") as log:
        for g in range(start_step, total_steps):
            epoch = g // steps_per_epoch
            offset = (g % steps_per_epoch) * batch
            perm = np.random.default_rng(derive_seed(config.seed, "perm", epoch)).permutation(n)
            indices = perm[offset:offset + batch]
            batch_data = _gather_batch(samples, indices)

            seen = {}
            generator = torch.Generator().manual_seed(derive_seed(config.seed, "train", g))
            try:
                loss = train_step(
                    bundle.denoiser, bundle.conditioner, optimizer, batch_data,
                    bundle.schedule, generator,
                    on_context=lambda ctx: seen.update(context=ctx),
                )
            except TrainingError as exc:
                raise TrainingError(
                    f"step {g} failed on records {batch_data['ids']}: {exc}"
                ) from exc
            loss_history.append(loss)
            entry = {"step": g, "epoch": epoch, "loss": loss}
            log.write(json.dumps(entry, sort_keys=True) + "\n")
            if hook is not None:
                hook({
                    **entry,
                    "visual_source": "kept_strip",
                    "visual_digests": batch_data["visual_digests"],
                    "context": seen.get("context"),
                })
            if config.checkpoint_every and (g + 1) % config.checkpoint_every == 0:
                write_checkpoint(g + 1)

    write_checkpoint(total_steps)
    return checkpoint_path


# ---------------------------------------------------------------------------
# expansion


@dataclass
class StepLog:
    """What it takes to reproduce one expansion step."""

    step: int
    direction: str
    local_caption: str
    seed: int
    canvas_digest: str

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "direction": self.direction,
            "local_caption": self.local_caption,
            "seed": self.seed,
            "canvas_digest": self.canvas_digest,
        }


@dataclass
class ExpansionState:
    """A canvas plus everything needed to replay how it was produced."""

    canvas: Canvas
    input_image: np.ndarray
    global_caption: str
    flags: AblationFlags
    master_seed: int
    checkpoint_digest: str
    step_log: list[StepLog] = field(default_factory=list)

    @property
    def plan(self) -> list[str]:
        return [entry.direction for entry in self.step_log]

    def to_dict(self) -> dict:
        return {
            "global_caption": self.global_caption,
            "flags": self.flags.to_dict(),
            "master_seed": self.master_seed,
            "checkpoint_digest": self.checkpoint_digest,
            "base_window": self.canvas.base_window,
            "shift": self.canvas.shift,
            "steps_taken": self.canvas.steps_taken,
            "plan": self.plan,
            "canvas_digest": image_digest(self.canvas.image),
            "input_digest": image_digest(self.input_image),
            "step_log": [entry.to_dict() for entry in self.step_log],
        }


def save_state(state: ExpansionState, out_dir) -> Path:
    """Persist a state directory: JSON log, viewable PNGs, exact float arrays."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(state.canvas.image, out / "canvas.png")
    save_png(state.input_image, out / "input.png")
    np.save(out / "canvas.npy", state.canvas.image)
    np.save(out / "input.npy", state.input_image)
    (out / "state.json").write_text(json.dumps(state.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def load_state(state_dir) -> ExpansionState:
    root = Path(state_dir)
    info = json.loads((root / "state.json").read_text())
    canvas_image = np.load(root / "canvas.npy")
    input_image = np.load(root / "input.npy")
    log = [StepLog(**entry) for entry in info["step_log"]]
    canvas = Canvas(
        image=canvas_image,
        base_window=info["base_window"],
        shift=info["shift"],
        steps_taken=info["steps_taken"],
        plan=[Direction.parse(d) for d in info["plan"]],
    )
    state = ExpansionState(
        canvas=canvas,
        input_image=input_image,
        global_caption=info["global_caption"],
        flags=AblationFlags(**info["flags"]),
        master_seed=info["master_seed"],
        checkpoint_digest=info["checkpoint_digest"],
        step_log=log,
    )
    if image_digest(canvas_image) != info["canvas_digest"]:
        raise ValidationError(f"canvas in {root} does not match its recorded digest")
    return state


def _zero_local(bundle: ModelBundle) -> TokenEmbeddings:
    shape = (bundle.config.tokens, bundle.config.embed_dim)
    return TokenEmbeddings(np.zeros(shape, dtype=np.float32), SOURCE_LOCAL)


@torch.no_grad()
def _render_step(bundle: ModelBundle, canvas: Canvas, direction: Direction,
                 local_caption: str, global_emb, sample_seed: int, hook=None,
                 step_index: int = 0):
    """One deterministic shift-and-inpaint step given an already-known caption."""
    step_input = build_step_input(canvas, direction)
    if local_caption:
        local_emb = encode_text(
            Caption(local_caption, CaptionKind.LOCAL_INFERENCE), bundle.text_encoder
        )
    else:
        local_emb = _zero_local(bundle)
    visual_emb = encode_visual(canvas.image, bundle.vision_encoder)
    context = build_context(bundle.conditioner, global_emb, local_emb, visual_emb)
    window = sample_inpaint(
        step_input, context, bundle.denoiser, bundle.schedule, bundle.codec,
        steps=bundle.config.sample_steps, seed=sample_seed,
    )
    if hook is not None:
        hook({
            "step": step_index,
            "visual_source": "full_canvas",
            "visual_shape": tuple(canvas.image.shape[:2]),
            "visual_digest": image_digest(canvas.image),
            "context": context,
        })
    return composite(canvas, window, direction)


def _advance(state: ExpansionState, bundle: ModelBundle, backend: LLMBackend | None,
             n_steps: int, direction, hook=None) -> ExpansionState:
    directions = [Direction.parse(d) for d in
                  (direction if isinstance(direction, (list, tuple)) else [direction] * n_steps)]
    if len(directions) != n_steps:
        raise ValidationError(f"direction plan has {len(directions)} entries for {n_steps} steps")
    global_emb = encode_text(
        Caption(state.global_caption, CaptionKind.GLOBAL), bundle.text_encoder
    )
    for offset, step_direction in enumerate(directions):
        step = state.canvas.steps_taken
        if state.flags.use_local:
            if backend is None:
                raise ValidationError("an LLM backend is required when local captions are on")
            window = edge_window(state.canvas, step_direction)
            try:
                caption = inference_local_caption(
                    window, step_direction, backend,
                    bundle.config.retries, bundle.config.backoff,
                ).text
            except BackendError as exc:
                raise ExpansionError(
                    f"step {step} caption request failed: {exc}", step=step, state=state
                ) from exc
        else:
            caption = ""
        seed = derive_seed(state.master_seed, "step", step)
        state.canvas = _render_step(
            bundle, state.canvas, step_direction, caption, global_emb, seed,
            hook=hook, step_index=step,
        )
        state.step_log.append(StepLog(
            step=step,
            direction=step_direction.value,
            local_caption=caption,
            seed=seed,
            canvas_digest=image_digest(state.canvas.image),
        ))
    return state


def expand(local_image, global_caption: str, n_steps: int, direction,
           backend: LLMBackend | None, checkpoint_path, flags: AblationFlags | None = None,
           seed: int = 0, hook=None) -> ExpansionState:
    """Autoregressively grow a square window `n_steps` shifts in `direction`.

    The global caption is taken as given and never regenerated; the local
    caption for each step comes from the backend (skipped entirely when local
    captions are ablated).  Geometry and weights come from the checkpoint.
    On a backend failure the partial state rides along on the raised error.
    """
    if n_steps < 0:
        raise ValidationError(f"n_steps must be >= 0, got {n_steps}")
    if not str(global_caption).strip():
        raise ValidationError("a nonempty global caption is required")
    bundle, _, _ = _bundle_from_checkpoint(checkpoint_path, flags)
    image = check_square_image(local_image, "local image")
    if image.shape[0] != bundle.config.base_window:
        raise ValidationError(
            f"local image side {image.shape[0]} does not match the checkpoint's "
            f"base window {bundle.config.base_window}"
        )
    state = ExpansionState(
        canvas=Canvas.from_image(image, bundle.config.shift),
        input_image=image.copy(),
        global_caption=str(global_caption),
        flags=bundle.conditioner.flags,
        master_seed=int(seed),
        checkpoint_digest=file_digest(checkpoint_path),
    )
    return _advance(state, bundle, backend, n_steps, direction, hook=hook)


def continue_expansion(state: ExpansionState, m_steps: int, direction,
                       backend: LLMBackend | None, checkpoint_path, hook=None) -> ExpansionState:
    """Extend a previous expansion by `m_steps`; equivalent to one longer run."""
    if file_digest(checkpoint_path) != state.checkpoint_digest:
        raise ValidationError("checkpoint does not match the one recorded in the state log")
    bundle, _, _ = _bundle_from_checkpoint(checkpoint_path, state.flags)
    return _advance(state, bundle, backend, m_steps, direction, hook=hook)


def replay(state: ExpansionState, checkpoint_path, hook=None) -> Canvas:
    """Rebuild the canvas from the step log without any LLM calls.

    Every step's result is checked against the logged digest, so a tampered
    caption or seed is reported at the step where it diverges.
    """
    if file_digest(checkpoint_path) != state.checkpoint_digest:
        raise ValidationError("checkpoint does not match the one recorded in the state log")
    bundle, _, _ = _bundle_from_checkpoint(checkpoint_path, state.flags)
    canvas = Canvas.from_image(state.input_image, bundle.config.shift)
    global_emb = encode_text(
        Caption(state.global_caption, CaptionKind.GLOBAL), bundle.text_encoder
    )
    for entry in state.step_log:
        canvas = _render_step(
            bundle, canvas, Direction.parse(entry.direction), entry.local_caption,
            global_emb, entry.seed, hook=hook, step_index=entry.step,
        )
        digest = image_digest(canvas.image)
        if digest != entry.canvas_digest:
            raise ValidationError(
                f"replay diverged at step {entry.step}: canvas digest {digest[:12]} "
                f"does not match the logged {entry.canvas_digest[:12]}"
            )
    return canvas
