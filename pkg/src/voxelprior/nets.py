"""Small dense networks with hand-written reverse-mode gradients.

Parameters live in float32 (so checkpoints round-trip bit-exactly) while all
forward/backward arithmetic runs in float64. Hidden activation is ReLU; the
output is either sigmoid (RGB heads) or linear (diffusion denoiser).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import formats


@dataclass
class MlpParams:
    weights: list  # [np.float32 (out, in)] per layer
    biases: list   # [np.float32 (out,)] per layer
    output_activation: str = "sigmoid"  # "sigmoid" | "linear"

    def __post_init__(self):
        if self.output_activation not in ("sigmoid", "linear"):
            raise ValueError(f"bad output activation {self.output_activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights/biases must be equal-length, non-empty lists")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    "layer dimensions do not chain: "
                    f"{self.weights[i - 1].shape} -> {self.weights[i].shape}"
                )
        for W, b in zip(self.weights, self.biases):
            if b.shape != (W.shape[0],):
                raise ValueError(f"bias shape {b.shape} does not match {W.shape}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def param_arrays(self) -> list:
        """Flat parameter list [W0, b0, W1, b1, ...]; views, not copies."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend([W, b])
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            output_activation=self.output_activation,
        )


def glorot_init(sizes, rng: np.random.Generator,
                output_activation: str = "sigmoid") -> MlpParams:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(W.astype(np.float32))
        biases.append(np.zeros(fan_out, dtype=np.float32))
    return MlpParams(weights=weights, biases=biases,
                     output_activation=output_activation)


def forward(mlp: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain forward pass; x is (..., in_dim), float64 output."""
    y, _ = forward_tape(mlp, x)
    return y


def forward_tape(mlp: MlpParams, x: np.ndarray):
    """Forward pass keeping layer inputs and pre-activations for backward."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    a = x[None, :] if squeeze else x.reshape(-1, x.shape[-1])
    if a.shape[-1] != mlp.in_dim:
        raise ValueError(f"input width {a.shape[-1]} != expected {mlp.in_dim}")
    inputs, preacts = [], []
    n_layers = len(mlp.weights)
    for li, (W, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(a)
        z = a @ W.astype(np.float64).T + b.astype(np.float64)
        preacts.append(z)
        if li < n_layers - 1:
            a = np.maximum(z, 0.0)
        elif mlp.output_activation == "sigmoid":
            a = _sigmoid(z)
        else:
            a = z
    out_shape = x.shape[:-1] + (mlp.out_dim,)
    tape = _Tape(inputs=inputs, preacts=preacts, output=a, batch_shape=x.shape[:-1])
    return a.reshape(out_shape), tape


@dataclass
class _Tape:
    inputs: list
    preacts: list
    output: np.ndarray
    batch_shape: tuple


def backward(mlp: MlpParams, tape: _Tape, d_out: np.ndarray):
    """Gradients of a scalar loss given dL/d(output).

    Returns (dL/d(input), [dW...], [db...]) with dW/db in float64 and the
    input gradient shaped like the forward input.
    """
    d = np.asarray(d_out, dtype=np.float64).reshape(-1, mlp.out_dim)
    if d.shape[0] != tape.output.shape[0]:
        raise ValueError("adjoint batch size does not match tape")
    if mlp.output_activation == "sigmoid":
        y = tape.output
        dz = d * y * (1.0 - y)
    else:
        dz = d
    grads_w = [None] * len(mlp.weights)
    grads_b = [None] * len(mlp.biases)
    for li in range(len(mlp.weights) - 1, -1, -1):
        a_prev = tape.inputs[li]
        grads_w[li] = dz.T @ a_prev
        grads_b[li] = dz.sum(axis=0)
        if li > 0:
            da = dz @ mlp.weights[li].astype(np.float64)
            dz = da * (tape.preacts[li - 1] > 0.0)
    d_in = dz @ mlp.weights[0].astype(np.float64)
    return d_in.reshape(tape.batch_shape + (mlp.in_dim,)), grads_w, grads_b


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# serialization (shared by the VFLD and EDIF containers)
# ---------------------------------------------------------------------------

def write_mlp(f, mlp: MlpParams) -> None:
    formats.write_u32(f, len(mlp.weights))
    for W, b in zip(mlp.weights, mlp.biases):
        formats.write_u32(f, W.shape[0], W.shape[1])
        formats.write_f32_array(f, W)
        formats.write_f32_array(f, b)


def read_mlp(f, output_activation: str = "sigmoid") -> MlpParams:
    n_layers = formats.read_u32(f)
    if not 1 <= n_layers <= 64:
        raise formats.FormatError(f"implausible layer count {n_layers}")
    weights, biases = [], []
    for _ in range(n_layers):
        out_dim = formats.read_u32(f)
        in_dim = formats.read_u32(f)
        weights.append(formats.read_f32_array(f, (out_dim, in_dim)))
        biases.append(formats.read_f32_array(f, (out_dim,)))
    return MlpParams(weights=weights, biases=biases,
                     output_activation=output_activation)
