"""
Signed-distance geometry network and diffuse/specular appearance networks.

The geometry network maps (x - 0.5, E_geo(x)) to a signed distance. The
diffuse network maps (x - 0.5, E_app(x)) to a diffuse colour and a specular
feature vector; the specular network maps (feature, view direction) to a
specular colour. Colours are sigmoid outputs and the final colour is their
sum.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from scipy.special import expit

import autodiff as ad
from autodiff import Expr, ParamBlock
from hashgrid import GridConfig, HashGridEncoder


logger = logging.getLogger(__name__)

Points = Union[np.ndarray, Expr]


@dataclass
class FieldConfig:
    """
    Network sizes and initialization constants.

    Attributes:
        geo_hidden, geo_layers: Geometry MLP width and hidden-layer count.
        diffuse_hidden, diffuse_layers: Diffuse MLP width and hidden-layer count.
        specular_hidden, specular_layers: Specular MLP width and hidden-layer count.
        spec_features (int): Length K of the specular feature vector.
        init_radius (float): Radius of the initial SDF sphere around the box center.
        sharpness_init (float): Initial s = exp(beta).
        eps (float): Stabilizer in the SDF-to-opacity conversion.
        geo_grid, app_grid: Hash-grid configs of the two encoders.
    """

    geo_hidden: int = 64
    geo_layers: int = 2
    diffuse_hidden: int = 64
    diffuse_layers: int = 2
    specular_hidden: int = 32
    specular_layers: int = 2
    spec_features: int = 8
    init_radius: float = 0.25
    sharpness_init: float = 30.0
    eps: float = 1e-6
    geo_grid: GridConfig = field(default_factory=GridConfig)
    app_grid: GridConfig = field(default_factory=GridConfig)


@dataclass
class AppearanceSample:
    """Per-point appearance; members are arrays or expressions of shape (P, 3) / (P, K)."""

    c_d: Points
    c_s: Points
    f_s: Points
    c: Points


class MLP:
    """
    Fully connected ReLU network with row-vector layers h @ W + b.

    Parameters:
        sizes (List[int]): Layer widths from input to output.
        rng (np.random.Generator): Weight initialization source.
        name (str): Prefix for ParamBlock names.
    """

    def __init__(self, sizes: List[int], rng: np.random.Generator, name: str):
        self.sizes = list(sizes)
        self.name = name
        self.weights: List[ParamBlock] = []
        self.biases: List[ParamBlock] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(ParamBlock(w, name=f"{name}.w{i}"))
            self.biases.append(ParamBlock(np.zeros(fan_out), name=f"{name}.b{i}"))

    def parameters(self) -> List[ParamBlock]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def __call__(self, h: Points) -> Expr:
        out, _ = self.forward_with_masks(h)
        return out

    def forward_with_masks(self, h: Points):
        """Forward pass that also returns the ReLU activity masks of the hidden layers."""
        masks = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.affine(h, ad.param(w), ad.param(b))
            if i < last:
                masks.append(h.value > 0)
                h = ad.relu(h)
        return h, masks

    def evaluate(self, h: np.ndarray) -> np.ndarray:
        """Numeric forward pass without a graph."""
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.values + b.values
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def input_gradient_expr(self, masks: List[np.ndarray]) -> Expr:
        """
        d output / d input for a single-output network as a (P, in) expression,
        built from the recorded masks. Differentiable w.r.t. the weights.
        """
        g = ad.reshape(ad.param(self.weights[-1]), (1, self.sizes[-2]))
        for i in range(len(self.weights) - 2, -1, -1):
            g = g * masks[i].astype(np.float64)
            g = ad.matmul(g, ad.transpose(ad.param(self.weights[i]), (1, 0)))
        return g


class FieldModel:
    """
    SDF field with decomposed appearance.

    Parameters:
        config (FieldConfig): Architecture and initialization settings.
        rng (np.random.Generator): Initialization source.
    """

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        self.config = config
        self.geo_encoder = HashGridEncoder(config.geo_grid, rng, name="geo_grid")
        self.app_encoder = HashGridEncoder(config.app_grid, rng, name="app_grid")

        geo_in = 3 + self.geo_encoder.output_dim
        self.geo_mlp = MLP([geo_in] + [config.geo_hidden] * config.geo_layers + [1], rng, "geo_mlp")
        self._geometric_init(rng)

        app_in = 3 + self.app_encoder.output_dim
        self.diffuse_mlp = MLP(
            [app_in] + [config.diffuse_hidden] * config.diffuse_layers + [3 + config.spec_features],
            rng,
            "diffuse_mlp",
        )
        self.specular_mlp = MLP(
            [config.spec_features + 3] + [config.specular_hidden] * config.specular_layers + [3],
            rng,
            "specular_mlp",
        )
        self.beta = ParamBlock(math.log(config.sharpness_init), name="beta")

    def _geometric_init(self, rng: np.random.Generator):
        """Bias the geometry MLP toward |x - 0.5| - init_radius."""
        mlp = self.geo_mlp
        for i, (w, b) in enumerate(zip(mlp.weights[:-1], mlp.biases[:-1])):
            fan_out = w.shape[1]
            values = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(fan_out), size=w.shape)
            if i == 0:
                values[3:, :] = 0.0
            w.assign(values)
            b.assign(np.zeros(b.shape))
        w_out = mlp.weights[-1]
        fan_in = w_out.shape[0]
        w_out.assign(rng.normal(math.sqrt(math.pi) / math.sqrt(fan_in), 1e-4, size=w_out.shape))
        mlp.biases[-1].assign(np.full(mlp.biases[-1].shape, -self.config.init_radius))

    def parameters(self) -> List[ParamBlock]:
        return self.geometry_parameters() + self.appearance_parameters()

    def geometry_parameters(self) -> List[ParamBlock]:
        return self.geo_encoder.parameters() + self.geo_mlp.parameters() + [self.beta]

    def appearance_parameters(self) -> List[ParamBlock]:
        return self.app_encoder.parameters() + self.diffuse_mlp.parameters() + self.specular_mlp.parameters()

    # -- geometry -----------------------------------------------------------

    def _geo_input(self, x: Points, alpha: Optional[float]) -> Expr:
        return ad.concat([ad.as_expr(x) - 0.5, self.geo_encoder.encode_expr(x, alpha)], axis=1)

    def sdf_expr(self, x: Points, alpha: Optional[float] = None) -> Expr:
        """Signed distance (P,) differentiable w.r.t. geometry parameters and x."""
        out = self.geo_mlp(self._geo_input(x, alpha))
        return ad.reshape(out, (out.value.shape[0],))

    def sdf(self, x: np.ndarray, alpha: Optional[float] = None) -> np.ndarray:
        """Numeric signed distance at points x (P, 3)."""
        x = np.asarray(x, dtype=np.float64)
        h = np.concatenate([x - 0.5, self.geo_encoder.encode(x, alpha)], axis=1)
        return self.geo_mlp.evaluate(h)[:, 0]

    def sdf_gradient_expr(self, x: np.ndarray, alpha: Optional[float] = None) -> Expr:
        """
        Analytic spatial gradient of the SDF at fixed points as a (P, 3) expression.

        Built from the MLP's input gradient and the encoder Jacobian, so it is a
        first-order expression in the parameters.
        """
        x = np.asarray(x, dtype=np.float64)
        _, masks = self.geo_mlp.forward_with_masks(self._geo_input(x, alpha))
        g = self.geo_mlp.input_gradient_expr(masks)
        jacobian = self.geo_encoder.jacobian_expr(x, alpha)
        return g[:, :3] + ad.einsum("pf,pfa->pa", g[:, 3:], jacobian)

    def sdf_gradient(self, x: np.ndarray, alpha: Optional[float] = None) -> np.ndarray:
        return self.sdf_gradient_expr(x, alpha).value

    # -- appearance ---------------------------------------------------------

    def appearance_expr(self, x: Points, v: Points, alpha: Optional[float] = None) -> AppearanceSample:
        """Diffuse, specular and total colour as expressions."""
        h = ad.concat([ad.as_expr(x) - 0.5, self.app_encoder.encode_expr(x, alpha)], axis=1)
        out = self.diffuse_mlp(h)
        c_d = ad.sigmoid(out[:, :3])
        f_s = out[:, 3:]
        c_s = ad.sigmoid(self.specular_mlp(ad.concat([f_s, v], axis=1)))
        return AppearanceSample(c_d=c_d, c_s=c_s, f_s=f_s, c=c_d + c_s)

    def appearance(self, x: np.ndarray, v: np.ndarray, alpha: Optional[float] = None) -> AppearanceSample:
        """Numeric appearance at points x with unit view directions v."""
        x = np.asarray(x, dtype=np.float64)
        out = self.diffuse_mlp.evaluate(np.concatenate([x - 0.5, self.app_encoder.encode(x, alpha)], axis=1))
        c_d = expit(out[:, :3])
        f_s = out[:, 3:]
        c_s = expit(self.specular_mlp.evaluate(np.concatenate([f_s, np.asarray(v, dtype=np.float64)], axis=1)))
        return AppearanceSample(c_d=c_d, c_s=c_s, f_s=f_s, c=c_d + c_s)

    def diffuse(self, x: np.ndarray, alpha: Optional[float] = None):
        """Numeric diffuse colour and specular feature at points x."""
        x = np.asarray(x, dtype=np.float64)
        out = self.diffuse_mlp.evaluate(np.concatenate([x - 0.5, self.app_encoder.encode(x, alpha)], axis=1))
        return expit(out[:, :3]), out[:, 3:]

    # -- opacity ------------------------------------------------------------

    @property
    def sharpness(self) -> float:
        return float(np.exp(self.beta.values))

    def sharpness_expr(self) -> Expr:
        return ad.exp(ad.param(self.beta))


def sdf_to_alpha(sdf_prev, sdf_next, s, eps: float = 1e-6):
    """
    Opacity of the interval between two consecutive SDF samples.

    alpha = clamp((psi(s*prev) - psi(s*next)) / (psi(s*prev) + eps), 0, 1).
    Returns an expression when any input is one, otherwise an array.
    """
    symbolic = any(isinstance(v, Expr) for v in (sdf_prev, sdf_next, s))
    p = ad.sigmoid(ad.as_expr(sdf_prev) * s)
    n = ad.sigmoid(ad.as_expr(sdf_next) * s)
    alpha = ad.clip((p - n) / (p + eps), 0.0, 1.0)
    return alpha if symbolic else alpha.value
