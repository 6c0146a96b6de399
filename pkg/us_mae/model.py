"""
1-D masked-autoencoder transformer.

Parameter names (insertion order is also checkpoint order):

    enc.proj.{w,b}            patch projection P -> d_enc
    enc.pos                   encoder positional table N x d_enc
    enc.blocks.{i}.*          pre-LN encoder blocks
    dec.proj.{w,b}            latent projection d_enc -> d_dec
    dec.mask_token            shared mask token (d_dec,)
    dec.pos                   decoder positional table N x d_dec
    dec.blocks.{i}.*          pre-LN decoder blocks
    dec.head.{w,b}            reconstruction head d_dec -> P
    cls.head.{w,b}            classification head d_enc -> classes

Block entries: ln1.{g,b}, attn.{wq,bq,wk,bk,wv,bv,wo,bo}, ln2.{g,b},
mlp.{w1,b1,w2,b2}. Attention projects d_model to heads * d_head, which need
not equal d_model; wo maps back.

Forward functions take leading batch axes: patches (..., n, P) with
indices (..., n). A single example is the batch-free case.
"""

import logging
import math
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy.stats import truncnorm

from . import diffcore as dc
from .config import STREAM_INIT, derive_rng
from .diffcore import ParamSet, Tensor
from .errors import CompatibilityError, UsageError
from .patching import MaskBatch, MaskPlan, check_patch_size, mask_counts, to_patches
from .signal_synth import NUM_CLASSES, SIGNAL_LENGTH

logger = logging.getLogger(__name__)

INIT_STD = 0.02
INIT_TRUNCATION = 2.0
MLP_EXPANSION = 2

ENCODER_PREFIX = "enc."
CLASSIFIER_PREFIX = "cls."


@dataclass(frozen=True)
class ModelConfig:
    """Full architecture description."""
    d_model_enc: int
    d_model_dec: int
    heads: int
    d_head: int
    layers_enc: int
    layers_dec: int
    heads_dec: int
    d_head_dec: int
    patch_size: int = 32
    signal_length: int = SIGNAL_LENGTH
    dropout: float = 0.1
    mask_ratio: float = 0.75
    num_classes: int = NUM_CLASSES
    name: str = "custom"

    @property
    def patch_count(self) -> int:
        return self.signal_length // self.patch_size

    def validate(self) -> None:
        check_patch_size(self.signal_length, self.patch_size)
        for field_name in (
            "d_model_enc", "d_model_dec", "heads", "d_head", "layers_enc",
            "heads_dec", "d_head_dec", "num_classes",
        ):
            if getattr(self, field_name) < 1:
                raise UsageError(f"{field_name} must be >= 1, got {getattr(self, field_name)}")
        if self.layers_dec < 0:
            raise UsageError(f"layers_dec must be >= 0, got {self.layers_dec}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError(f"dropout must be in [0, 1), got {self.dropout}")
        mask_counts(self.patch_count, self.mask_ratio)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelConfig":
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def _preset(name, d_enc, d_dec, heads, d_head, layers_enc, layers_dec) -> ModelConfig:
    # Decoder keeps the head count; its head width scales with d_dec / d_enc
    return ModelConfig(
        d_model_enc=d_enc,
        d_model_dec=d_dec,
        heads=heads,
        d_head=d_head,
        layers_enc=layers_enc,
        layers_dec=layers_dec,
        heads_dec=heads,
        d_head_dec=d_head * d_dec // d_enc,
        name=name,
    )


PRESETS: Dict[str, ModelConfig] = {
    "T": _preset("T", 32, 16, 1, 32, 2, 1),
    "S": _preset("S", 64, 32, 2, 32, 3, 1),
    "M": _preset("M", 128, 64, 4, 32, 6, 2),
    "L": _preset("L", 192, 96, 6, 32, 9, 3),
    "M-dh32": _preset("M-dh32", 128, 64, 4, 32, 6, 2),
    "M-dh64": _preset("M-dh64", 128, 64, 4, 64, 6, 2),
    "M-dh128": _preset("M-dh128", 128, 64, 4, 128, 6, 2),
    "M-dh64-h3": _preset("M-dh64-h3", 128, 64, 3, 64, 6, 2),
    "M-dh64-h5": _preset("M-dh64-h5", 128, 64, 5, 64, 6, 2),
}


def preset(name: str, **overrides) -> ModelConfig:
    """Named preset with optional field overrides (None values are ignored)."""
    if name not in PRESETS:
        raise UsageError(f"Unknown model preset {name!r}; choose from {', '.join(PRESETS)}")
    changes = {k: v for k, v in overrides.items() if v is not None}
    config = replace(PRESETS[name], **changes)
    config.validate()
    return config


# ==================== Parameter layout ====================

def _block_shapes(prefix: str, d_model: int, heads: int, d_head: int) -> Dict[str, Tuple]:
    width = heads * d_head
    hidden = MLP_EXPANSION * d_model
    return {
        f"{prefix}.ln1.g": (d_model,),
        f"{prefix}.ln1.b": (d_model,),
        f"{prefix}.attn.wq": (d_model, width),
        f"{prefix}.attn.bq": (width,),
        f"{prefix}.attn.wk": (d_model, width),
        f"{prefix}.attn.bk": (width,),
        f"{prefix}.attn.wv": (d_model, width),
        f"{prefix}.attn.bv": (width,),
        f"{prefix}.attn.wo": (width, d_model),
        f"{prefix}.attn.bo": (d_model,),
        f"{prefix}.ln2.g": (d_model,),
        f"{prefix}.ln2.b": (d_model,),
        f"{prefix}.mlp.w1": (d_model, hidden),
        f"{prefix}.mlp.b1": (hidden,),
        f"{prefix}.mlp.w2": (hidden, d_model),
        f"{prefix}.mlp.b2": (d_model,),
    }


def param_shapes(
    config: ModelConfig, decoder: bool = True, classifier: bool = True
) -> Dict[str, Tuple]:
    """Ordered name -> shape map for the selected parts of the model."""
    n, p = config.patch_count, config.patch_size
    de, dd = config.d_model_enc, config.d_model_dec
    shapes = {"enc.proj.w": (p, de), "enc.proj.b": (de,), "enc.pos": (n, de)}
    for i in range(config.layers_enc):
        shapes.update(_block_shapes(f"enc.blocks.{i}", de, config.heads, config.d_head))
    if decoder:
        shapes.update({
            "dec.proj.w": (de, dd),
            "dec.proj.b": (dd,),
            "dec.mask_token": (dd,),
            "dec.pos": (n, dd),
        })
        for i in range(config.layers_dec):
            shapes.update(_block_shapes(f"dec.blocks.{i}", dd, config.heads_dec, config.d_head_dec))
        shapes.update({"dec.head.w": (dd, p), "dec.head.b": (p,)})
    if classifier:
        shapes.update({"cls.head.w": (de, config.num_classes), "cls.head.b": (config.num_classes,)})
    return shapes


def _is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in {"b", "bq", "bk", "bv", "bo", "b1", "b2"}


def _initial_value(name: str, shape: Tuple, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".g"):
        return np.ones(shape)
    if _is_bias(name):
        return np.zeros(shape)
    return truncnorm.rvs(
        -INIT_TRUNCATION, INIT_TRUNCATION, scale=INIT_STD, size=shape, random_state=rng
    )


def init_params(
    config: ModelConfig, seed: int, decoder: bool = True, classifier: bool = False
) -> ParamSet:
    """
    Fresh parameters: truncated-normal weights, embeddings and mask token
    (std 0.02, cut at 2 std), zero biases, unit LayerNorm gains.

    Each entry draws from its own substream so adding or dropping parts of
    the model leaves the remaining initial values unchanged.
    """
    config.validate()
    params = ParamSet()
    for name, shape in param_shapes(config, decoder, classifier).items():
        rng = derive_rng(seed, STREAM_INIT, _name_key(name))
        params.add(name, _initial_value(name, shape, rng))
    logger.debug("Initialized %d tensors (%d scalars)", len(params), params.num_elements())
    return params


def _name_key(name: str) -> int:
    # Stable across processes, unlike hash()
    return zlib.crc32(name.encode("utf-8"))


def add_classifier(params: ParamSet, config: ModelConfig, seed: int) -> ParamSet:
    """Encoder entries of `params` plus a freshly initialized classification head."""
    check_compatible(params, config, decoder=False, classifier=False)
    result = params.subset(ENCODER_PREFIX).copy()
    for name, shape in param_shapes(config, decoder=False, classifier=True).items():
        if name.startswith(CLASSIFIER_PREFIX):
            rng = derive_rng(seed, STREAM_INIT, _name_key(name))
            result.add(name, _initial_value(name, shape, rng))
    return result


def check_compatible(
    params: ParamSet, config: ModelConfig, decoder: bool = False, classifier: bool = False
) -> None:
    """Raise CompatibilityError unless every expected tensor exists with the right shape."""
    for name, shape in param_shapes(config, decoder, classifier).items():
        if name not in params:
            raise CompatibilityError(f"Checkpoint lacks tensor {name!r} required by {config.name}")
        if params[name].shape != shape:
            raise CompatibilityError(
                f"Tensor {name!r} has shape {params[name].shape}, {config.name} expects {shape}"
            )


# ==================== Forward pass ====================

def _linear(x: Tensor, params: ParamSet, weight: str, bias: str) -> Tensor:
    return dc.add(dc.matmul(x, params[weight]), params[bias])


def embed_patches(params: ParamSet, patches: np.ndarray, indices: np.ndarray) -> Tensor:
    """Row i = patches[i] @ W_proj + b + pos[indices[i]]."""
    projected = _linear(Tensor(patches), params, "enc.proj.w", "enc.proj.b")
    return dc.add(projected, dc.take_rows(params["enc.pos"], indices))


def _split_heads(x: Tensor, heads: int, d_head: int) -> Tensor:
    # (..., n, h*dh) -> (..., h, n, dh)
    return dc.swapaxes(dc.reshape(x, x.shape[:-1] + (heads, d_head)), -3, -2)


def mhsa(params: ParamSet, prefix: str, x: Tensor, heads: int, d_head: int) -> Tensor:
    """Multi-head self-attention with heads * d_head wide projections."""
    q = _split_heads(_linear(x, params, f"{prefix}.wq", f"{prefix}.bq"), heads, d_head)
    k = _split_heads(_linear(x, params, f"{prefix}.wk", f"{prefix}.bk"), heads, d_head)
    v = _split_heads(_linear(x, params, f"{prefix}.wv", f"{prefix}.bv"), heads, d_head)
    scores = dc.scale(dc.matmul(q, dc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d_head))
    attended = dc.matmul(dc.softmax(scores, axis=-1), v)
    merged = dc.swapaxes(attended, -3, -2)
    merged = dc.reshape(merged, merged.shape[:-2] + (heads * d_head,))
    return _linear(merged, params, f"{prefix}.wo", f"{prefix}.bo")


def _mlp(params: ParamSet, prefix: str, x: Tensor) -> Tensor:
    hidden = dc.gelu(_linear(x, params, f"{prefix}.w1", f"{prefix}.b1"))
    return _linear(hidden, params, f"{prefix}.w2", f"{prefix}.b2")


def transformer_block(
    params: ParamSet,
    prefix: str,
    x: Tensor,
    heads: int,
    d_head: int,
    dropout: float,
    rng: Optional[np.random.Generator],
    training: bool,
) -> Tensor:
    """Pre-LN block: x + drop(attn(ln1(x))), then + drop(mlp(ln2(.)))."""
    normed = dc.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    attended = mhsa(params, f"{prefix}.attn", normed, heads, d_head)
    x = dc.add(x, dc.dropout(attended, dropout, rng, training))
    normed = dc.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return dc.add(x, dc.dropout(_mlp(params, f"{prefix}.mlp", normed), dropout, rng, training))


def encode(
    params: ParamSet,
    config: ModelConfig,
    patches: np.ndarray,
    indices: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """Latents (..., n, d_enc) for the given patches at the given positions."""
    patches = np.asarray(patches)
    if patches.shape[-1] != config.patch_size or np.shape(indices) != patches.shape[:-1]:
        raise UsageError(
            f"encode: patches {patches.shape} / indices {np.shape(indices)} "
            f"do not fit patch size {config.patch_size}"
        )
    x = embed_patches(params, patches, indices)
    for i in range(config.layers_enc):
        x = transformer_block(
            params, f"enc.blocks.{i}", x, config.heads, config.d_head,
            config.dropout, rng, training,
        )
    return x


def assemble_decoder_input(
    params: ParamSet,
    config: ModelConfig,
    latents: Tensor,
    plan: Union[MaskPlan, MaskBatch],
) -> Tensor:
    """
    Full (..., N, d_dec) decoder sequence: projected latents at visible
    slots, the shared mask token at masked slots, decoder positions on all.
    """
    n = config.patch_count
    if plan.visible.shape[-1] != latents.shape[-2] or plan.patch_count != n:
        raise UsageError(
            f"decode: plan with {plan.visible.shape[-1]} visible of {plan.patch_count} patches "
            f"does not match latents {latents.shape} for {n} patches"
        )
    projected = _linear(latents, params, "dec.proj.w", "dec.proj.b")
    placed = dc.scatter_rows(projected, plan.visible, n)

    lead = plan.masked.shape[:-1]
    indicator = np.zeros(lead + (n, 1), dtype=dc.working_dtype())
    np.put_along_axis(indicator, plan.masked[..., None], 1.0, axis=-2)
    return dc.add(dc.add(placed, dc.mul(indicator, params["dec.mask_token"])), params["dec.pos"])


def decode(
    params: ParamSet,
    config: ModelConfig,
    latents: Tensor,
    plan: Union[MaskPlan, MaskBatch],
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """Reconstruct all N patches (..., N, P) from the visible latents."""
    x = assemble_decoder_input(params, config, latents, plan)
    for i in range(config.layers_dec):
        x = transformer_block(
            params, f"dec.blocks.{i}", x, config.heads_dec, config.d_head_dec,
            config.dropout, rng, training,
        )
    return _linear(x, params, "dec.head.w", "dec.head.b")


def mae_loss(reconstruction: Tensor, target: np.ndarray, masked: np.ndarray) -> Tensor:
    """Mean absolute error over the masked patches only."""
    masked = np.asarray(masked)
    if masked.shape[-1] == 0:
        raise UsageError("Reconstruction loss needs at least one masked patch")
    target = np.asarray(target)
    if target.shape != reconstruction.shape:
        raise UsageError(f"mae_loss: reconstruction {reconstruction.shape} vs target {target.shape}")
    picked = dc.gather_rows(reconstruction, masked)
    wanted = np.take_along_axis(target, masked[..., None], axis=-2)
    return dc.mean(dc.absolute(dc.sub(picked, wanted)))


def pretrain_forward(
    params: ParamSet,
    config: ModelConfig,
    signals: np.ndarray,
    plan: Union[MaskPlan, MaskBatch],
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tuple[Tensor, Tensor]:
    """(masked L1 loss, reconstruction grid) for dequantized signals (..., L)."""
    patches = to_patches(np.asarray(signals, dtype=dc.working_dtype()), config.patch_size)
    visible = np.take_along_axis(patches, plan.visible[..., None], axis=-2)
    latents = encode(params, config, visible, plan.visible, rng, training)
    reconstruction = decode(params, config, latents, plan, rng, training)
    return mae_loss(reconstruction, patches, plan.masked), reconstruction


def classify_logits(
    params: ParamSet,
    config: ModelConfig,
    signals: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """Logits (..., classes): encode every patch, mean-pool, linear head."""
    patches = to_patches(np.asarray(signals, dtype=dc.working_dtype()), config.patch_size)
    indices = np.broadcast_to(np.arange(config.patch_count), patches.shape[:-1])
    latents = encode(params, config, patches, indices, rng, training)
    pooled = dc.mean(latents, axis=-2)
    return _linear(pooled, params, "cls.head.w", "cls.head.b")


# ==================== Parameter counts ====================

@dataclass
class ParamCounts:
    encoder_blocks: int
    decoder_blocks: int
    embeddings: int
    heads: int

    @property
    def total(self) -> int:
        return self.encoder_blocks + self.decoder_blocks + self.embeddings + self.heads


def param_count(config: ModelConfig) -> ParamCounts:
    """Trainable scalars per component, counting both heads."""
    counts = {"encoder_blocks": 0, "decoder_blocks": 0, "embeddings": 0, "heads": 0}
    for name, shape in param_shapes(config, decoder=True, classifier=True).items():
        size = int(np.prod(shape))
        if name.startswith("enc.blocks."):
            counts["encoder_blocks"] += size
        elif name.startswith("dec.blocks."):
            counts["decoder_blocks"] += size
        elif name.startswith(("dec.head.", "cls.head.")):
            counts["heads"] += size
        else:
            counts["embeddings"] += size
    return ParamCounts(**counts)
