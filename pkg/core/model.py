"""
Encoder-decoder captioning model with sparse boundary-aware attention

Encoder block (per modality): sparse self-attention -> residual+LayerNorm ->
FFN -> residual+LayerNorm, then (when enabled) sparse cross-modal attention
against the other modality -> residual+LayerNorm.

Decoder block: causal vanilla self-attention -> residual+LayerNorm ->
enc-dec attention to image and motion (boundary selection with alpha = 0,
no local band) -> hierarchical fusion over the two context vectors ->
residual+LayerNorm -> FFN -> residual+LayerNorm.
"""

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

import numpy as np
from loguru import logger

from config.app_config import ModelConfig
from config.constants import Constants
from utils.enums import AttentionMode
from . import numkit as nk
from .attention import (AttentionMask, MultiheadParams, SiteTrace, hierarchical_attention,
                        sparse_multihead)
from .exceptions import AlignmentError, ContractError, DimensionError, SequenceLengthError
from .numkit import Parameter, Tape, Tensor

if TYPE_CHECKING:
    from .synthdata import CaptionRecord


TokenSequence = List[int]

MODALITIES = ("image", "motion")


@dataclass
class EncodedFeatures:
    """Aligned image and motion streams, T x d each"""

    image: Tensor
    motion: Tensor

    def __post_init__(self):
        if self.image.shape[0] != self.motion.shape[0]:
            raise AlignmentError(
                f"image has {self.image.shape[0]} steps but motion has {self.motion.shape[0]}")

    @property
    def steps(self) -> int:
        return self.image.shape[0]


class Weights:
    """Parameter lookup for one forward pass; tracked on the tape when one is given

    A generator turns on dropout at rate dropout_rate for this pass.
    """

    def __init__(self, params: Dict[str, Parameter], tape: Optional[Tape] = None,
                 dropout_rate: float = 0.0, rng: Optional[np.random.Generator] = None):
        self.params = params
        self.tape = tape
        self.dropout_rate = dropout_rate if rng is not None else 0.0
        self.rng = rng

    def __getitem__(self, name: str) -> Tensor:
        param = self.params[name]
        if self.tape is None:
            return param.value
        return self.tape.watch(param)

    def drop(self, x: Tensor) -> Tensor:
        if self.dropout_rate == 0.0:
            return x
        return nk.dropout(x, self.dropout_rate, self.rng)

    def attention(self, prefix: str, heads: int) -> MultiheadParams:
        return MultiheadParams(
            W_Q=self[f"{prefix}.Wq"],
            W_K=self[f"{prefix}.Wk"],
            W_V=self[f"{prefix}.Wv"],
            W_O=self[f"{prefix}.Wo"],
            heads=heads,
        )


def positional_encoding(T: int, d: int, dtype=np.float64) -> Tensor:
    """Sinusoid table: even columns sin(pos / 10000^(2k/d)), odd columns cos of the same angle"""
    if d % 2 != 0:
        raise DimensionError("positional_encoding", (T, d), detail="d must be even")
    positions = np.arange(T, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)[None, :]
    angles = positions * rates
    table = np.empty((T, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return Tensor(table.astype(dtype))


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _layer_norm(x: Tensor, w: Weights, prefix: str) -> Tensor:
    return nk.layernorm(x, w[f"{prefix}.g"], w[f"{prefix}.b"])


def feed_forward(x: Tensor, w: Weights, prefix: str) -> Tensor:
    """max(0, x W2 + b2) W3 + b3"""
    hidden = nk.relu(nk.add(nk.matmul(x, w[f"{prefix}.W2"]), w[f"{prefix}.b2"]))
    return nk.add(nk.matmul(hidden, w[f"{prefix}.W3"]), w[f"{prefix}.b3"])


def _site(trace: Optional[List[SiteTrace]], name: str) -> Optional[SiteTrace]:
    if trace is None:
        return None
    site = SiteTrace(name)
    trace.append(site)
    return site


def _encoder_attention(queries: Tensor, keys: Tensor, params: MultiheadParams, cfg: ModelConfig,
                       site: Optional[SiteTrace]) -> Tensor:
    mode = cfg.encoder_mode
    t_k = keys.shape[0]
    if mode == AttentionMode.BOUNDARY:
        return sparse_multihead(queries, keys, keys, params, mode, n=cfg.encoder_budget(t_k),
                                alpha=cfg.alpha_enc, r=cfg.encoder_radius, trace=site)
    if mode == AttentionMode.EQUIDISTANT:
        return sparse_multihead(queries, keys, keys, params, mode, n=cfg.encoder_budget(t_k), trace=site)
    return sparse_multihead(queries, keys, keys, params, mode, trace=site)


def encoder_block(feats: EncodedFeatures, w: Weights, cfg: ModelConfig, block: int = 0,
                  trace: Optional[List[SiteTrace]] = None) -> EncodedFeatures:
    """One encoder block over both aligned streams"""
    if feats.image.shape[0] != feats.motion.shape[0]:
        raise AlignmentError(f"encoder block {block}: image has {feats.image.shape[0]} steps, "
                             f"motion has {feats.motion.shape[0]}")
    streams = {}
    for modality in MODALITIES:
        prefix = f"enc{block}.{modality}"
        x = getattr(feats, modality)
        attended = _encoder_attention(x, x, w.attention(f"{prefix}.self", cfg.heads), cfg,
                                      _site(trace, f"{prefix}.self"))
        x = _layer_norm(nk.add(x, w.drop(attended)), w, f"{prefix}.ln1")
        x = _layer_norm(nk.add(x, w.drop(feed_forward(x, w, f"{prefix}.ffn"))), w, f"{prefix}.ln2")
        streams[modality] = x

    if cfg.has_cross_modal:
        crossed = {}
        for modality, other in (("image", "motion"), ("motion", "image")):
            prefix = f"enc{block}.{modality}"
            x = streams[modality]
            attended = _encoder_attention(x, streams[other], w.attention(f"{prefix}.cross", cfg.heads), cfg,
                                          _site(trace, f"{prefix}.cross"))
            crossed[modality] = _layer_norm(nk.add(x, w.drop(attended)), w, f"{prefix}.ln3")
        streams = crossed

    return EncodedFeatures(image=streams["image"], motion=streams["motion"])


def decoder_step_attention(E_prefix: Tensor, enc: EncodedFeatures, w: Weights, cfg: ModelConfig,
                           block: int = 0, trace: Optional[List[SiteTrace]] = None) -> Tensor:
    """One decoder block over a (teacher-forced) prefix of t word embeddings"""
    if E_prefix.data.ndim != 2 or E_prefix.shape[0] < 1:
        raise ContractError(f"decoder block {block}: empty prefix")
    t = E_prefix.shape[0]
    prefix = f"dec{block}"

    attended = sparse_multihead(E_prefix, E_prefix, E_prefix, w.attention(f"{prefix}.self", cfg.heads),
                                AttentionMode.VANILLA, extra_mask=AttentionMask.causal(t),
                                trace=_site(trace, f"{prefix}.self"))
    queries = _layer_norm(nk.add(E_prefix, w.drop(attended)), w, f"{prefix}.ln1")

    contexts = {}
    for modality in MODALITIES:
        memory = getattr(enc, modality)
        params = w.attention(f"{prefix}.enc_{modality}", cfg.heads)
        site = _site(trace, f"{prefix}.enc_{modality}")
        if cfg.decoder_mode == AttentionMode.BOUNDARY:
            contexts[modality] = sparse_multihead(queries, memory, memory, params, AttentionMode.BOUNDARY,
                                                  n=cfg.decoder_budget(memory.shape[0]),
                                                  alpha=cfg.alpha_dec, trace=site)
        else:
            contexts[modality] = sparse_multihead(queries, memory, memory, params, AttentionMode.VANILLA,
                                                  trace=site)

    fused = hierarchical_attention(queries, contexts["image"], contexts["motion"],
                                   w.attention(f"{prefix}.fuse", cfg.heads), trace=_site(trace, f"{prefix}.fuse"))
    fused = _layer_norm(nk.add(queries, w.drop(fused)), w, f"{prefix}.ln2")
    return _layer_norm(nk.add(fused, w.drop(feed_forward(fused, w, f"{prefix}.ffn"))), w, f"{prefix}.ln3")


def output_distribution(V_out: Tensor, w: Weights) -> Tensor:
    """softmax(V W_p + b_p), one probability row per step"""
    return nk.softmax(nk.add(nk.matmul(V_out, w["out.W"]), w["out.b"]))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


def parameter_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Every parameter name and shape, in initialisation (and checkpoint) order"""
    d, f, v = cfg.d_model, cfg.feature_dim, cfg.vocab_size
    hidden = 4 * d
    shapes: Dict[str, tuple] = {}

    def attention(prefix):
        for name in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"{prefix}.{name}"] = (d, d)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.W2"] = (d, hidden)
        shapes[f"{prefix}.b2"] = (hidden,)
        shapes[f"{prefix}.W3"] = (hidden, d)
        shapes[f"{prefix}.b3"] = (d,)

    for modality in MODALITIES:
        shapes[f"input.{modality}.W"] = (f, d)
        shapes[f"input.{modality}.b"] = (d,)
    shapes["embed.W"] = (v, d)

    for block in range(cfg.blocks):
        for modality in MODALITIES:
            prefix = f"enc{block}.{modality}"
            attention(f"{prefix}.self")
            norm(f"{prefix}.ln1")
            ffn(f"{prefix}.ffn")
            norm(f"{prefix}.ln2")
            if cfg.has_cross_modal:
                attention(f"{prefix}.cross")
                norm(f"{prefix}.ln3")

    for block in range(cfg.blocks):
        prefix = f"dec{block}"
        attention(f"{prefix}.self")
        norm(f"{prefix}.ln1")
        attention(f"{prefix}.enc_image")
        attention(f"{prefix}.enc_motion")
        attention(f"{prefix}.fuse")
        norm(f"{prefix}.ln2")
        ffn(f"{prefix}.ffn")
        norm(f"{prefix}.ln3")

    shapes["out.W"] = (d, v)
    shapes["out.b"] = (v,)
    return shapes


def _initial_value(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf in ("b", "b2", "b3"):
        return np.zeros(shape)
    if name == "embed.W":
        return rng.normal(0.0, 1.0, size=shape)
    return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)


class SBATModel:
    """Parameters plus the forward passes of the captioning transformer"""

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: Optional[Dict[str, Parameter]] = None):
        self.cfg = cfg
        self.seed = seed
        self.dtype = cfg.numpy_dtype
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                name: Parameter.create(name, _initial_value(name, shape, rng), dtype=self.dtype)
                for name, shape in parameter_shapes(cfg).items()
            }
        else:
            expected = parameter_shapes(cfg)
            if list(params) != list(expected):
                raise ContractError("parameter names do not match the configuration")
            for name, shape in expected.items():
                if params[name].shape != shape:
                    raise DimensionError("model_parameters", params[name].shape, shape, detail=name)
        self.params: Dict[str, Parameter] = params
        logger.debug(f"Model ready: variant={cfg.variant.value} d={cfg.d_model} h={cfg.heads} "
                     f"N={cfg.blocks} params={self.parameter_count()}")

    # -- bookkeeping ------------------------------------------------------

    def parameters(self) -> List[Parameter]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.value.data.size for p in self.params.values()))

    @staticmethod
    def expected_parameter_count(cfg: ModelConfig) -> int:
        """Closed form of parameter_count for a configuration"""
        d, f, v, n = cfg.d_model, cfg.feature_dim, cfg.vocab_size, cfg.blocks
        encoder_stream = 12 * d * d + 9 * d
        if cfg.has_cross_modal:
            encoder_stream += 4 * d * d + 2 * d
        decoder = 24 * d * d + 11 * d
        return 2 * (f * d + d) + v * d + n * (2 * encoder_stream + decoder) + d * v + v

    def weights(self, tape: Optional[Tape] = None, rng: Optional[np.random.Generator] = None) -> Weights:
        """Parameter view for one pass; passing rng turns on the configured dropout"""
        return Weights(self.params, tape, self.cfg.dropout, rng)

    def zero_grad(self):
        for param in self.params.values():
            param.zero_grad()

    # -- forward ----------------------------------------------------------

    def _as_tensor(self, array) -> Tensor:
        return Tensor(np.asarray(array, dtype=self.dtype))

    def embed_inputs(self, image, motion, w: Weights) -> EncodedFeatures:
        """Affine projection of raw features to d_model plus positions"""
        image = np.asarray(image)
        motion = np.asarray(motion)
        if image.ndim != 2 or motion.ndim != 2:
            raise DimensionError("embed_inputs", image.shape, motion.shape, detail="features must be T x d_feat")
        if image.shape[0] != motion.shape[0]:
            raise AlignmentError(f"image has {image.shape[0]} steps but motion has {motion.shape[0]}")
        if image.shape[0] > self.cfg.max_src_len:
            raise SequenceLengthError(f"{image.shape[0]} feature steps exceed max_src_len={self.cfg.max_src_len}")
        for stream in (image, motion):
            if stream.shape[1] != self.cfg.feature_dim:
                raise DimensionError("embed_inputs", stream.shape, (self.cfg.feature_dim,),
                                     detail="feature width must equal feature_dim")

        steps = image.shape[0]
        table = positional_encoding(steps, self.cfg.d_model, self.dtype) if self.cfg.positional_encoding else None
        streams = {}
        for modality, raw in (("image", image), ("motion", motion)):
            x = nk.add(nk.matmul(self._as_tensor(raw), w[f"input.{modality}.W"]), w[f"input.{modality}.b"])
            streams[modality] = w.drop(nk.add(x, table) if table is not None else x)
        return EncodedFeatures(**streams)

    def encode(self, image, motion, tape: Optional[Tape] = None, trace: Optional[List[SiteTrace]] = None,
               rng: Optional[np.random.Generator] = None) -> EncodedFeatures:
        w = self.weights(tape, rng)
        feats = self.embed_inputs(image, motion, w)
        for block in range(self.cfg.blocks):
            feats = encoder_block(feats, w, self.cfg, block, trace)
        return feats

    def embed_tokens(self, ids: Sequence[int], w: Weights) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ContractError("token prefix must be a non-empty sequence")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ContractError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        one_hot = np.zeros((ids.size, self.cfg.vocab_size), dtype=self.dtype)
        one_hot[np.arange(ids.size), ids] = 1
        embedded = nk.matmul(Tensor(one_hot), w["embed.W"])
        if self.cfg.positional_encoding:
            embedded = nk.add(embedded, positional_encoding(ids.size, self.cfg.d_model, self.dtype))
        return w.drop(embedded)

    def decode(self, prefix: Sequence[int], enc: EncodedFeatures, tape: Optional[Tape] = None,
               trace: Optional[List[SiteTrace]] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Per-step distributions for every position of the prefix"""
        if len(prefix) > self.cfg.max_tgt_len:
            raise SequenceLengthError(f"{len(prefix)} tokens exceed max_tgt_len={self.cfg.max_tgt_len}")
        w = self.weights(tape, rng)
        hidden = self.embed_tokens(prefix, w)
        for block in range(self.cfg.blocks):
            hidden = decoder_step_attention(hidden, enc, w, self.cfg, block, trace)
        return output_distribution(hidden, w)

    def forward_tokens(self, image, motion, caption: Sequence[int], tape: Optional[Tape] = None,
                       trace: Optional[List[SiteTrace]] = None, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Teacher-forced distributions for caption positions 1..T_e"""
        caption = list(caption)
        if len(caption) < 2 or caption[0] != Constants.BOS_ID:
            raise ContractError("caption must start with BOS and hold at least one target token")
        if len(caption) > self.cfg.max_tgt_len:
            raise SequenceLengthError(f"caption of {len(caption)} tokens exceeds max_tgt_len={self.cfg.max_tgt_len}")
        enc = self.encode(image, motion, tape, trace, rng)
        return self.decode(caption[:-1], enc, tape, trace, rng)

    def forward_teacher_forced(self, record: "CaptionRecord", caption_index: int = 0,
                               tape: Optional[Tape] = None,
                               trace: Optional[List[SiteTrace]] = None,
                               rng: Optional[np.random.Generator] = None) -> Tensor:
        return self.forward_tokens(record.image_features, record.motion_features,
                                   record.captions[caption_index], tape, trace, rng)

    # -- step interface used by decoding ------------------------------------

    def encode_record(self, record: "CaptionRecord") -> EncodedFeatures:
        return self.encode(record.image_features, record.motion_features)

    def step_log_probs(self, enc: EncodedFeatures, prefix: Sequence[int]) -> np.ndarray:
        """log p(next token | prefix) as a float64 vector"""
        dists = self.decode(prefix, enc)
        last = dists.data[-1].astype(np.float64)
        return np.log(np.maximum(last, Constants.PROB_FLOOR))
