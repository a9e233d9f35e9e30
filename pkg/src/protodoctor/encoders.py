"""Physiological, demographic and prognostic encoders.

All modules are built in float64. Recurrent cells use LSTM gating with
weights drawn uniformly from +-1/sqrt(fan_in) and forget-gate bias 1.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ContractError, ShapeError


def init_lstm(lstm: nn.LSTM, generator: torch.Generator | None = None, zero: bool = False) -> None:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except forget gate = 1.

    PyTorch stacks gate blocks as (input, forget, cell, output).
    """
    H = lstm.hidden_size
    with torch.no_grad():
        for name, p in lstm.named_parameters():
            if zero:
                p.zero_()
            elif name.startswith("weight"):
                bound = 1.0 / math.sqrt(p.shape[1])
                p.uniform_(-bound, bound, generator=generator)
            elif name.startswith("bias_ih"):
                p.zero_()
                p[H:2 * H] = 1.0
            else:
                p.zero_()


def init_linear(layer: nn.Linear, generator: torch.Generator | None = None) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()


class AdditiveAttention(nn.Module):
    """score(x) = u . tanh(W x + b), softmax-normalized over one axis."""

    def __init__(self, width: int, attn_width: int = 8, generator=None):
        super().__init__()
        self.proj = nn.Linear(width, attn_width, dtype=torch.float64)
        self.u = nn.Linear(attn_width, 1, bias=False, dtype=torch.float64)
        init_linear(self.proj, generator)
        init_linear(self.u, generator)

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return self.u(torch.tanh(self.proj(x))).squeeze(-1)


class PhysiologicalEncoder(nn.Module):
    """Maps an encoded physiology tensor (B, T, n_in) to hourly embeddings
    (B, T, n_out).

    ``simple`` mode is one unidirectional LSTM layer over the full input, so
    row t only sees hours 1..t. ``channelwise`` mode runs a 2-layer
    bidirectional LSTM per physiological channel, then causal additive
    attention over hours (per channel) and additive attention over channels
    (per hour), adds the recurrent features back as a skip connection and
    projects to ``n_out``.
    """

    def __init__(self, n_in: int, n_out: int, mode: str = "simple", channel_groups=None,
                 channel_hidden: int = 8, dropout: float = 0.5, generator=None):
        super().__init__()
        if n_out <= 0:
            raise ContractError("embedding width must be positive")
        if not 0.0 <= dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")
        self.n_in, self.n_out, self.mode = n_in, n_out, mode
        self.dropout = nn.Dropout(dropout)
        if mode == "simple":
            self.rnn = nn.LSTM(n_in, n_out, batch_first=True, dtype=torch.float64)
            init_lstm(self.rnn, generator)
        elif mode == "channelwise":
            if not channel_groups:
                raise ContractError("channelwise mode needs channel_groups")
            flat = sorted(c for g in channel_groups for c in g)
            if flat != list(range(n_in)):
                raise ShapeError("channel_groups must partition the input columns")
            self.channel_groups = [list(g) for g in channel_groups]
            self.channel_rnns = nn.ModuleList()
            for g in self.channel_groups:
                rnn = nn.LSTM(len(g), channel_hidden, num_layers=2, bidirectional=True,
                              batch_first=True, dtype=torch.float64)
                init_lstm(rnn, generator)
                self.channel_rnns.append(rnn)
            feat = 2 * channel_hidden
            self.time_attention = AdditiveAttention(feat, generator=generator)
            self.feature_attention = AdditiveAttention(feat, generator=generator)
            self.out = nn.Linear(feat * len(self.channel_groups), n_out, dtype=torch.float64)
            init_linear(self.out, generator)
        else:
            raise ContractError(f"unknown encoder mode {mode!r}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"physiology width {x.shape[-1]} != encoder input {self.n_in}")
        if self.mode == "simple":
            h, _ = self.rnn(x)
            return self.dropout(h)
        B, T, _ = x.shape
        feats = torch.stack(
            [rnn(x[..., g])[0] for g, rnn in zip(self.channel_groups, self.channel_rnns)], dim=2
        )  # (B, T, V, F)
        # causal attention over hours, separately for each channel
        scores = self.time_attention.scores(feats)  # (B, T, V)
        causal = torch.tril(torch.ones(T, T, dtype=torch.bool))
        logits = scores.permute(0, 2, 1).unsqueeze(2).expand(B, -1, T, T)  # (B, V, t, s)
        logits = logits.masked_fill(~causal, float("-inf"))
        alpha = torch.softmax(logits, dim=-1)
        context = torch.einsum("bvts,bsvf->btvf", alpha, feats)
        # attention over channels, per hour; skip connection keeps the raw features
        beta = torch.softmax(self.feature_attention.scores(context), dim=-1)  # (B, T, V)
        V = feats.shape[2]
        mixed = (V * beta).unsqueeze(-1) * context + feats
        return self.dropout(self.out(mixed.reshape(B, T, -1)))


class DemographicEncoder(nn.Module):
    """One hidden tanh layer; its activations are the demographic embedding."""

    def __init__(self, n_in: int, n_hidden: int = 64, generator=None):
        super().__init__()
        if n_hidden <= 0:
            raise ContractError("demographic embedding width must be positive")
        self.n_in = n_in
        self.layer = nn.Linear(n_in, n_hidden, dtype=torch.float64)
        init_linear(self.layer, generator)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        if d.shape[-1] != self.n_in:
            raise ShapeError(f"demographic width {d.shape[-1]} != encoder input {self.n_in}")
        return torch.tanh(self.layer(d))


class PrognosticEncoder(nn.Module):
    """Single-layer LSTM over health-state vectors with hidden width N_C.

    The hidden state after reading hours 1..t-1 is the prediction for hour t.
    """

    def __init__(self, n_courses: int, generator=None):
        super().__init__()
        self.n_courses = n_courses
        self.rnn = nn.LSTM(n_courses, n_courses, batch_first=True, dtype=torch.float64)
        init_lstm(self.rnn, generator)

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        """Predictions for hours 2..T from states (B, T, N_C); returns
        (B, T-1, N_C)."""
        if states.shape[-1] != self.n_courses:
            raise ShapeError(f"health-state width {states.shape[-1]} != {self.n_courses}")
        if states.shape[-2] < 2:
            raise ContractError("step-ahead prediction needs at least two hours")
        out, _ = self.rnn(states[..., :-1, :])
        return out


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def encode_physiological(x, encoder: PhysiologicalEncoder) -> torch.Tensor:
    """Hourly embeddings for one record (T, n_in) or a batch (B, T, n_in)."""
    x = _tensor(x)
    if x.ndim == 2:
        return encoder(x.unsqueeze(0))[0]
    return encoder(x)


def encode_demographics(d, encoder: DemographicEncoder) -> torch.Tensor:
    return encoder(_tensor(d))


def predict_next_health_state(history, encoder: PrognosticEncoder) -> torch.Tensor:
    """Prediction for hour t given states for hours 1..t-1, shape (t-1, N_C).

    Only the supplied history is read, so the result is causal by
    construction.
    """
    history = _tensor(history)
    if history.ndim != 2 or history.shape[0] < 1:
        raise ContractError("prediction for hour t needs t >= 2 (at least one past state)")
    if history.shape[1] != encoder.n_courses:
        raise ShapeError(f"health-state width {history.shape[1]} != {encoder.n_courses}")
    out, _ = encoder.rnn(history.unsqueeze(0))
    return out[0, -1]
