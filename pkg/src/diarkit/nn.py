"""The diarization network: encoder, attractor decoder, and embedding enhancer.

The encoder maps a T x F feature sequence to frame embeddings E (T x D).
The attractor decoder turns an enrollment stack (3 learnable activity rows
for non-speech / single-speaker / overlap, followed by one averaged
embedding per known speaker) into one attractor per row; frame-level
posteriors are sigmoid(A @ E^T). The optional enhancer runs the same layer
type the other way round (frames as queries, attractors as keys/values)
and yields a second posterior head from the refined embeddings.

No positional embeddings anywhere: row order carries no information, which
is what makes speaker slots permutation-equivariant and removes the need
for a permutation-invariant loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tt
from .errors import ConfigError
from .tensor import Module, Parameter, Tensor

_POST_LO = np.nextafter(0.0, 1.0)
_POST_HI = np.nextafter(1.0, 0.0)


@dataclass
class ModelConfig:
    input_dim: int = 345
    attn_dim: int = 256
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 4
    enh_layers: int = 0  # 0 disables the enhancer head
    ff_dim: int = 2048
    encoder_kind: str = "transformer"  # or "conformer"
    conformer_kernel: int = 31
    share_dec_enh_layers_2_to_4: bool = True
    dropout: float = 0.1

    def __post_init__(self):
        if self.attn_dim % self.heads != 0:
            raise ConfigError(f"attn_dim {self.attn_dim} not divisible by {self.heads} heads")
        if self.conformer_kernel % 2 == 0:
            raise ConfigError(f"conformer kernel {self.conformer_kernel} must be odd")
        if self.encoder_kind not in ("transformer", "conformer"):
            raise ConfigError(f"unknown encoder kind {self.encoder_kind!r}")

    @property
    def use_enhancer(self) -> bool:
        return self.enh_layers > 0


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int):
        super().__init__()
        self.w = Parameter(tt.xavier_uniform(rng, (n_in, n_out)))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return tt.add_bias(tt.matmul(x, self.w.tensor), self.b.tensor)


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return tt.layernorm(x, self.gain.tensor, self.bias.tensor)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over full row sets (no masking)."""

    def __init__(self, rng, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        q, k, v = self.wq(queries), self.wk(memory), self.wv(memory)
        inv_sqrt = 1.0 / np.sqrt(self.head_dim)
        outs = []
        for h in range(self.heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = tt.slice_cols(q, lo, hi)
            kh = tt.slice_cols(k, lo, hi)
            vh = tt.slice_cols(v, lo, hi)
            scores = tt.scale(tt.matmul(qh, tt.transpose(kh)), inv_sqrt)
            outs.append(tt.matmul(tt.softmax(scores, axis=-1), vh))
        return self.wo(tt.concat_cols(outs))


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int, activation=tt.relu):
        super().__init__()
        self.lin1 = Linear(rng, dim, hidden)
        self.lin2 = Linear(rng, hidden, dim)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.activation(self.lin1(x)))


class EncoderLayer(Module):
    """Post-norm transformer block: attention and feed-forward sublayers."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(rng, cfg.attn_dim, cfg.heads)
        self.ff = FeedForward(rng, cfg.attn_dim, cfg.ff_dim)
        self.ln1 = LayerNorm(cfg.attn_dim)
        self.ln2 = LayerNorm(cfg.attn_dim)
        self.p_drop = cfg.dropout

    def __call__(self, x: Tensor, rng) -> Tensor:
        x = self.ln1(tt.add(x, tt.dropout(self.attn(x, x), self.p_drop, rng, self.training)))
        x = self.ln2(tt.add(x, tt.dropout(self.ff(x), self.p_drop, rng, self.training)))
        return x


class DecoderLayer(Module):
    """Post-norm block with self-attention, cross-attention, feed-forward.

    Serves both directions: attractor decoding (queries = enrollments,
    memory = frames) and enhancement (queries = frames, memory =
    attractors). The two uses have identical parameter shapes, which is
    what allows layer sharing to keep the total count unchanged.
    """

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(rng, cfg.attn_dim, cfg.heads)
        self.cross_attn = MultiHeadAttention(rng, cfg.attn_dim, cfg.heads)
        self.ff = FeedForward(rng, cfg.attn_dim, cfg.ff_dim)
        self.ln1 = LayerNorm(cfg.attn_dim)
        self.ln2 = LayerNorm(cfg.attn_dim)
        self.ln3 = LayerNorm(cfg.attn_dim)
        self.p_drop = cfg.dropout

    def __call__(self, x: Tensor, memory: Tensor, rng) -> Tensor:
        x = self.ln1(tt.add(x, tt.dropout(self.self_attn(x, x), self.p_drop, rng, self.training)))
        x = self.ln2(tt.add(x, tt.dropout(self.cross_attn(x, memory), self.p_drop, rng, self.training)))
        x = self.ln3(tt.add(x, tt.dropout(self.ff(x), self.p_drop, rng, self.training)))
        return x


class ConvModule(Module):
    """Pointwise-GLU, depthwise convolution, norm, swish, pointwise."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d = cfg.attn_dim
        self.pw1 = Linear(rng, d, 2 * d)
        self.kernel = Parameter(tt.xavier_uniform(rng, (cfg.conformer_kernel, d)))
        self.kernel_bias = Parameter(np.zeros(d))
        self.norm = LayerNorm(d)
        self.pw2 = Linear(rng, d, d)
        self.dim = d

    def __call__(self, x: Tensor) -> Tensor:
        h = self.pw1(x)
        gated = tt.mul(tt.slice_cols(h, 0, self.dim),
                       tt.sigmoid(tt.slice_cols(h, self.dim, 2 * self.dim)))
        h = tt.depthwise_conv1d(gated, self.kernel.tensor, self.kernel_bias.tensor)
        return self.pw2(tt.swish(self.norm(h)))


class ConformerLayer(Module):
    """Macaron block: half-step FF, self-attention, convolution, half-step FF.

    Pre-norm with a closing layer norm; the inner normalisations are all
    per-position (batch independent), and the attention carries no
    positional terms, so locality comes solely from the depthwise kernel.
    """

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        d = cfg.attn_dim
        self.ff1 = FeedForward(rng, d, cfg.ff_dim, activation=tt.swish)
        self.ff2 = FeedForward(rng, d, cfg.ff_dim, activation=tt.swish)
        self.attn = MultiHeadAttention(rng, d, cfg.heads)
        self.conv = ConvModule(rng, cfg)
        self.ln_ff1 = LayerNorm(d)
        self.ln_attn = LayerNorm(d)
        self.ln_conv = LayerNorm(d)
        self.ln_ff2 = LayerNorm(d)
        self.ln_out = LayerNorm(d)
        self.p_drop = cfg.dropout

    def __call__(self, x: Tensor, rng) -> Tensor:
        drop = lambda t: tt.dropout(t, self.p_drop, rng, self.training)
        x = tt.add(x, tt.scale(drop(self.ff1(self.ln_ff1(x))), 0.5))
        n = self.ln_attn(x)
        x = tt.add(x, drop(self.attn(n, n)))
        x = tt.add(x, drop(self.conv(self.ln_conv(x))))
        x = tt.add(x, tt.scale(drop(self.ff2(self.ln_ff2(x))), 0.5))
        return self.ln_out(x)


class Encoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        self.proj = Linear(rng, cfg.input_dim, cfg.attn_dim)
        if cfg.encoder_kind == "conformer":
            self.layers = [ConformerLayer(rng, cfg) for _ in range(cfg.enc_layers)]
        else:
            self.layers = [EncoderLayer(rng, cfg) for _ in range(cfg.enc_layers)]

    def __call__(self, x: Tensor, rng) -> Tensor:
        h = self.proj(x)
        for layer in self.layers:
            h = layer(h, rng)
        return h


def _stacked_layers(rng, cfg: ModelConfig, n: int, tie_tail: bool) -> list[DecoderLayer]:
    """n decoder-type layers; with tie_tail, layers 2..n are one object."""
    if n <= 0:
        return []
    if tie_tail and n > 1:
        head, tail = DecoderLayer(rng, cfg), DecoderLayer(rng, cfg)
        return [head] + [tail] * (n - 1)
    return [DecoderLayer(rng, cfg) for _ in range(n)]


class DiarizationModel(Module):
    """Full encoder / attractor decoder / enhancer stack.

    With the sharing flag set and the enhancer enabled, layers 2..n of the
    decoder collapse to a single parameter set and so do layers 2..n of the
    enhancer, leaving each with two parameter-bearing layers. The enhanced
    model then counts exactly as many parameters as the enhancer-free one.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = Encoder(rng, cfg)
        tie = cfg.share_dec_enh_layers_2_to_4 and cfg.use_enhancer
        self.decoder_layers = _stacked_layers(rng, cfg, cfg.dec_layers, tie)
        self.enhancer_layers = _stacked_layers(rng, cfg, cfg.enh_layers, tie)
        # Learnable enrollments for non-speech / single-speaker / overlap.
        self.activity_enroll = Parameter(
            rng.normal(0.0, cfg.attn_dim ** -0.5, size=(3, cfg.attn_dim))
        )
        self.rng = np.random.default_rng(seed + 1)  # dropout stream

    # ------------------------------------------------------------------
    # forward pieces

    def encode(self, features) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ConfigError(
                f"features have shape {x.shape}, expected (T, {self.cfg.input_dim})"
            )
        return self.encoder(x, self.rng)

    def build_enrollment(self, speaker_enrolls=None) -> Tensor:
        """Stack [non, sgl, ovl] activity rows above S speaker rows."""
        if speaker_enrolls is None:
            return self.activity_enroll.tensor
        spk = speaker_enrolls if isinstance(speaker_enrolls, Tensor) else Tensor(speaker_enrolls)
        if spk.shape[0] == 0:
            return self.activity_enroll.tensor
        if spk.shape[1] != self.cfg.attn_dim:
            raise ConfigError(
                f"speaker enrollments have width {spk.shape[1]}, expected {self.cfg.attn_dim}"
            )
        return tt.concat_rows([self.activity_enroll.tensor, spk])

    def decode_attractors(self, enroll: Tensor, emb: Tensor) -> Tensor:
        if enroll.shape[1] != emb.shape[1]:
            raise ConfigError(
                f"enrollment width {enroll.shape[1]} != embedding width {emb.shape[1]}"
            )
        h = enroll
        for layer in self.decoder_layers:
            h = layer(h, emb, self.rng)
        return h

    def enhance(self, emb: Tensor, attractors: Tensor) -> Tensor:
        if not self.enhancer_layers:
            raise ConfigError("model was built without an enhancer")
        h = emb
        for layer in self.enhancer_layers:
            h = layer(h, attractors, self.rng)
        return h

    def posteriors(self, attractors: Tensor, emb: Tensor) -> Tensor:
        """sigmoid(A @ E^T), clamped into the open unit interval."""
        return tt.clip(tt.sigmoid(tt.matmul(attractors, tt.transpose(emb))),
                       _POST_LO, _POST_HI)

    def forward_full(self, features, speaker_enrolls=None, use_enhancer: Optional[bool] = None):
        """Run the whole stack; see ForwardResult for the pieces returned."""
        if use_enhancer is None:
            use_enhancer = self.cfg.use_enhancer
        if use_enhancer and not self.enhancer_layers:
            raise ConfigError("enhancer requested but not built")
        emb = self.encode(features)
        return self.heads(emb, speaker_enrolls, use_enhancer)

    def heads(self, emb: Tensor, speaker_enrolls=None, use_enhancer: Optional[bool] = None):
        if use_enhancer is None:
            use_enhancer = self.cfg.use_enhancer
        enroll = self.build_enrollment(speaker_enrolls)
        attractors = self.decode_attractors(enroll, emb)
        post = self.posteriors(attractors, emb)
        post_enh = None
        if use_enhancer:
            post_enh = self.posteriors(attractors, self.enhance(emb, attractors))
        return ForwardResult(emb, attractors, post, post_enh)

    # ------------------------------------------------------------------
    # inference surface used by the decoding loop (numpy in / numpy out)

    def frame_embeddings(self, features: np.ndarray) -> np.ndarray:
        self.set_training(False)
        with tt.no_grad():
            return self.encode(features).data

    def enrollment_posteriors(self, emb: np.ndarray, speaker_enrolls: np.ndarray) -> np.ndarray:
        """Posterior matrix for given frame embeddings and speaker rows.

        Returns the enhanced head when the model has one, otherwise the
        plain head; rows are [non, sgl, ovl, spk1..spkS].
        """
        self.set_training(False)
        with tt.no_grad():
            spk = speaker_enrolls if len(speaker_enrolls) else None
            result = self.heads(Tensor(emb), spk)
            post = result.enhanced_posteriors if result.enhanced_posteriors is not None else result.posteriors
            return post.data


@dataclass
class ForwardResult:
    embeddings: Tensor
    attractors: Tensor
    posteriors: Tensor
    enhanced_posteriors: Optional[Tensor]
