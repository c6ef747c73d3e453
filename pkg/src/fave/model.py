"""Flow backbone: item embeddings, dual-time embedder, sequence encoder,
fusion block, output head and history decoder."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import Tensor, nn

from . import autodiff as ad
from .config import TrainConfig


class Linear(nn.Module):
    def __init__(self, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_out, n_in))
        self.bias = nn.Parameter(torch.zeros(n_out)) if bias else None

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        nn.init.xavier_uniform_(self.weight, generator=generator)
        if self.bias is not None:
            nn.init.zeros_(self.bias)

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, d)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = Linear(d, d)
        self.k = Linear(d, d)
        self.v = Linear(d, d)
        self.o = Linear(d, d)

    def _split(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        return x.reshape(B, L, self.heads, d // self.heads).transpose(1, 2)

    def project_context(self, context: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k(context)), self._split(self.v(context))

    def forward(self, query: Tensor, context: Tensor | tuple[Tensor, Tensor],
                mask: Tensor) -> Tensor:
        # mask: [B, Lq, Lk] bool, True where the query may attend;
        # context may be pre-projected (keys, values)
        k, v = context if isinstance(context, tuple) else self.project_context(context)
        out = ad.attention(self._split(self.q(query)), k, v, mask[:, None])
        B, _, Lq, _ = out.shape
        return self.o(out.transpose(1, 2).reshape(B, Lq, -1))


class EncoderBlock(nn.Module):
    """Pre-norm causal self-attention block."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, d)

    def forward(self, h: Tensor, attn_mask: Tensor, keep: Tensor) -> Tensor:
        x = self.ln1(h)
        h = h + self.attn(x, x, attn_mask)
        h = h + self.ffn(self.ln2(h))
        return h * keep


class FusionBlock(nn.Module):
    """The fused flow state attends over the encoded sequence, then an FFN."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, d)

    def forward(self, E: Tensor, context: tuple[Tensor, Tensor], key_mask: Tensor) -> Tensor:
        x = E[:, None, :]
        x = x + self.attn(self.ln1(x), context, key_mask[:, None, :])
        x = x + self.ffn(self.ln2(x))
        return x[:, 0]


class TimeEmbedder(nn.Module):
    """Sinusoidal features of a scalar time followed by a two-layer MLP."""

    def __init__(self, d: int, n_freqs: int = 64, freq_max: float = 100.0):
        super().__init__()
        self.register_buffer("freqs", torch.logspace(0.0, math.log10(freq_max), n_freqs))
        self.fc1 = Linear(2 * n_freqs, d)
        self.fc2 = Linear(d, d)

    def forward(self, t: Tensor) -> Tensor:
        angles = t[:, None] * self.freqs
        feats = ad.concat([torch.sin(angles), torch.cos(angles)], dim=-1)
        return self.fc2(ad.gelu(self.fc1(feats)))


class HistoryDecoder(nn.Module):
    """Three-layer tanh MLP from a hidden state to interaction space."""

    def __init__(self, d: int, hidden: int, n_items: int):
        super().__init__()
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, hidden)
        self.fc3 = Linear(hidden, n_items)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc3(ad.tanh(self.fc2(ad.tanh(self.fc1(x)))))


class Encoding(NamedTuple):
    states: Tensor                  # [B, L, d]
    key_mask: Tensor                # [B, L] bool
    e_s: Tensor                     # [B, d]
    context: tuple[Tensor, Tensor]  # fusion keys/values, [B, heads, L, d/heads]


def assemble_input(e_s: Tensor, x_t: Tensor, tau: Tensor, lam: Tensor) -> Tensor:
    """Fused network input ``e_s + lam * (x_t + tau)``."""
    return ad.add(e_s, ad.mul(lam, ad.add(x_t, tau)))


class FaveModel(nn.Module):
    def __init__(self, n_items: int, d: int = 128, heads: int = 4, blocks: int = 2,
                 max_len: int = 50, decoder_hidden: int = 128, delta: float = 1.0,
                 time_freqs: int = 64, time_freq_max: float = 100.0, emb_norm: float = 0.0):
        super().__init__()
        self.n_items = n_items
        self.emb_norm = emb_norm
        self.d = d
        self.max_len = max_len
        self.delta = delta
        self.item_emb = nn.Parameter(torch.empty(n_items + 1, d))
        self.pos_emb = nn.Parameter(torch.empty(max_len, d))
        self.blocks = nn.ModuleList(EncoderBlock(d, heads) for _ in range(blocks))
        self.enc_norm = LayerNorm(d)
        self.time_emb = TimeEmbedder(d, time_freqs, time_freq_max)
        self.fusion = FusionBlock(d, heads)
        self.out_norm = LayerNorm(d)
        self.head = Linear(d, d)
        self.decoder = HistoryDecoder(d, decoder_hidden, n_items)

    @classmethod
    def from_config(cls, config: TrainConfig, n_items: int) -> "FaveModel":
        model = cls(n_items, d=config.d, heads=config.heads, blocks=config.blocks,
                    max_len=config.max_len, decoder_hidden=config.decoder_hidden,
                    delta=config.delta, time_freqs=config.time_freqs,
                    time_freq_max=config.time_freq_max, emb_norm=config.emb_norm)
        model.to(config.torch_dtype)
        model.reset_parameters(torch.Generator().manual_seed(config.seed))
        return model

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        std = 1.0 / math.sqrt(self.d)
        nn.init.normal_(self.item_emb, std=std, generator=generator)
        nn.init.normal_(self.pos_emb, std=std, generator=generator)
        for m in self.modules():
            if isinstance(m, Linear):
                m.reset_parameters(generator)

    # embeddings ---------------------------------------------------------------

    def _rows(self, table: Tensor) -> Tensor:
        # optional projection of every row onto the sphere of radius emb_norm
        if not self.emb_norm:
            return table
        norms = torch.sqrt((table * table).sum(dim=-1, keepdim=True)).clamp(min=1e-12)
        return table * (self.emb_norm / norms)

    @property
    def item_table(self) -> Tensor:
        """Embedding rows of real items (padding row excluded)."""
        return self._rows(self.item_emb[: self.n_items])

    def embed_items(self, ids: Tensor) -> Tensor:
        return ad.embedding(self._rows(self.item_emb), ids)

    def freeze_embeddings(self) -> None:
        self.item_emb.requires_grad_(False)

    @property
    def embeddings_frozen(self) -> bool:
        return not self.item_emb.requires_grad

    # modulation ---------------------------------------------------------------

    def sample_lambda(self, batch: int, generator: torch.Generator | None = None) -> Tensor:
        """Per-row modulation vectors: N(delta, delta) in training, delta in eval."""
        dtype = self.item_emb.dtype
        if not self.training:
            return torch.full((batch, self.d), float(self.delta), dtype=dtype)
        z = torch.randn(batch, self.d, generator=generator, dtype=dtype)
        return self.delta + math.sqrt(self.delta) * z

    # forward ------------------------------------------------------------------

    def time_feature(self, t: Tensor, r: Tensor) -> Tensor:
        return self.time_emb(t) + self.time_emb(r - t)

    def encode(self, sequences: Tensor) -> Encoding:
        if sequences.shape[1] != self.max_len:
            raise ValueError(f"sequences must have length {self.max_len}")
        keep = sequences != self.n_items
        L = sequences.shape[1]
        h = (self.embed_items(sequences) + self.pos_emb[None]) * keep[..., None]
        causal = torch.tril(torch.ones(L, L, dtype=torch.bool))
        attn_mask = causal[None] & keep[:, None, :]
        for block in self.blocks:
            h = block(h, attn_mask, keep[..., None])
        h = self.enc_norm(h) * keep[..., None]
        return Encoding(h, keep, h[:, -1], self.fusion.attn.project_context(h))

    def flow(self, enc: Encoding, x_t: Tensor, t: Tensor, r: Tensor,
             lam: Tensor) -> tuple[Tensor, Tensor]:
        """Target prediction ``f(x_t, t, r)`` and the pre-head state ``E_n``."""
        E = assemble_input(enc.e_s, x_t, self.time_feature(t, r), lam)
        E_n = self.out_norm(self.fusion(E, enc.context, enc.key_mask))
        return self.head(E_n), E_n

    def forward(self, sequences: Tensor, x_t: Tensor, t: Tensor | float, r: Tensor | float,
                lam: Tensor | None = None,
                generator: torch.Generator | None = None) -> tuple[Tensor, Tensor]:
        B = sequences.shape[0]
        t = _as_times(t, B, x_t.dtype)
        r = _as_times(r, B, x_t.dtype)
        check_times(t, r)
        if lam is None:
            lam = self.sample_lambda(B, generator)
        f_out, E_n = self.flow(self.encode(sequences), x_t, t, r, lam)
        ad.check_finite(f_out, "backbone output")
        ad.check_finite(E_n, "hidden state E_n")
        return f_out, E_n

    def decode_history(self, E_n: Tensor) -> Tensor:
        return self.decoder(E_n)


def _as_times(t, batch: int, dtype: torch.dtype) -> Tensor:
    if isinstance(t, Tensor):
        if t.dim() == 0:
            return t.to(dtype).expand(batch)
        return t.to(dtype)
    return torch.full((batch,), float(t), dtype=dtype)


def check_times(t: Tensor, r: Tensor) -> None:
    if bool((t < 0).any()) or bool((r > 1).any()):
        raise ValueError("times must lie in [0, 1]")
    if bool((r < t).any()):
        raise ValueError("interval end r must not precede t")
