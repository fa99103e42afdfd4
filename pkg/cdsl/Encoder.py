#!/usr/bin/env python

"""
Feature extractor F(.): a small MLP followed by an L2-normalization layer,
with a hand-derived backward pass and SGD (momentum + weight decay).
"""
import json
from typing import List, Sequence, Tuple

import numpy as np
from loguru import logger

from cdsl.numerics import as_vector, l2_normalize, l2_normalize_backward
from cdsl.utils import DimensionMismatch, CacheMismatch, InvalidConfig, IoError, ParseError


ACTIVATIONS = ("relu", "identity")
DEFAULT_HIDDEN = (64, 64)
DEFAULT_DIM = 16


class DenseLayer(object):
    """
    weight: (out_dim, in_dim); bias: (out_dim,)
    """
    def __init__(self, weight, bias, activation="relu"):
        if activation not in ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {activation!r}; use one of {ACTIVATIONS}")
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionMismatch(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not form a dense layer")
        self.activation = activation

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]


class EncoderModel(object):
    """
    MLP parameters plus the terminal L2-normalization. The version counter is bumped
    by every sgd_step so stale forward caches can be detected.
    """
    def __init__(self, layers: List[DenseLayer]):
        if not layers:
            raise InvalidConfig("an encoder needs at least one layer")
        for prev_layer, next_layer in zip(layers[:-1], layers[1:]):
            if prev_layer.out_dim != next_layer.in_dim:
                raise DimensionMismatch(
                    f"layer output {prev_layer.out_dim} does not chain into layer input {next_layer.in_dim}")
        self.layers = layers
        self.version = 0

    @classmethod
    def initialize(cls, input_dim, hidden: Sequence[int] = DEFAULT_HIDDEN, d=DEFAULT_DIM, seed=12345):
        """
        Uniform fan-based init in [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))], zero biases.
        Hidden layers use relu, the output layer is linear.
        """
        if input_dim < 1 or d < 1 or any(h_ < 1 for h_ in hidden):
            raise InvalidConfig(f"invalid architecture {input_dim} -> {list(hidden)} -> {d}")
        rng = np.random.default_rng(seed)
        dims = [input_dim] + list(hidden) + [d]
        layers = []
        for go_l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6. / (fan_in + fan_out))
            weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            activation = "identity" if go_l == len(dims) - 2 else "relu"
            layers.append(DenseLayer(weight, np.zeros(fan_out), activation))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].in_dim

    @property
    def output_dim(self):
        return self.layers[-1].out_dim

    def parameters(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(layer.weight, layer.bias) for layer in self.layers]

    def copy(self):
        new_model = EncoderModel(
            [DenseLayer(layer.weight.copy(), layer.bias.copy(), layer.activation) for layer in self.layers])
        new_model.version = self.version
        return new_model

    def embed(self, x_matrix):
        """forward without keeping a cache; rows of x_matrix -> rows of unit features"""
        return encoder_forward(self, x_matrix)[0]

    def same_parameters(self, other):
        if len(self.layers) != len(other.layers):
            return False
        return all(np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
                   and a.activation == b.activation for a, b in zip(self.layers, other.layers))

    def to_dict(self):
        return {
            "d": self.output_dim,
            "input_dim": self.input_dim,
            "layers": [
                {"shape": list(layer.weight.shape),
                 "weight": [float(w_) for w_ in layer.weight.reshape(-1)],
                 "bias": [float(b_) for b_ in layer.bias],
                 "activation": layer.activation}
                for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, model_dict):
        try:
            layers = []
            for layer_dict in model_dict["layers"]:
                out_dim, in_dim = layer_dict["shape"]
                weight = np.array(layer_dict["weight"], dtype=np.float64)
                if weight.size != out_dim * in_dim:
                    raise DimensionMismatch(
                        f"weight array of {weight.size} values does not fit shape {out_dim}x{in_dim}")
                layers.append(DenseLayer(weight.reshape(out_dim, in_dim), layer_dict["bias"],
                                         layer_dict["activation"]))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, DimensionMismatch):
                raise
            raise InvalidConfig(f"malformed encoder document: {e}")
        model = cls(layers)
        if model.output_dim != model_dict.get("d", model.output_dim):
            raise DimensionMismatch(f"declared d={model_dict['d']} but last layer outputs {model.output_dim}")
        return model

    def save(self, json_file, extra=None):
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(json_file, "w", encoding="utf-8", newline="\n") as output_h:
            json.dump(payload, output_h)
            output_h.write("\n")

    @classmethod
    def load(cls, json_file):
        try:
            with open(json_file, encoding="utf-8") as input_h:
                model_dict = json.load(input_h)
        except FileNotFoundError:
            raise IoError(f"Encoder file not found: {json_file}")
        except json.JSONDecodeError as e:
            raise ParseError(e.msg, line_number=e.lineno, path=json_file)
        logger.debug(f"loaded encoder from {json_file}")
        return cls.from_dict(model_dict)


class ForwardCache(object):
    def __init__(self, model, inputs, pre_activations, activations, raw_output, single):
        self.model_id = id(model)
        self.model_version = model.version
        self.inputs = inputs
        self.pre_activations = pre_activations
        self.activations = activations
        self.raw_output = raw_output
        self.single = single


def encoder_forward(model: EncoderModel, x) -> Tuple[np.ndarray, ForwardCache]:
    """
    :param x: one input vector, or a 2-D array with one input per row
    :return: (f, cache) where f = l2_normalize(MLP(x)) row-wise
    """
    x = as_vector(x)
    single = x.ndim == 1
    x_matrix = x[np.newaxis, :] if single else x
    if x_matrix.ndim != 2 or x_matrix.shape[1] != model.input_dim:
        raise DimensionMismatch(f"input of shape {x.shape} does not match encoder input dim {model.input_dim}")
    activations = [x_matrix]
    pre_activations = []
    hidden = x_matrix
    for layer in model.layers:
        z_ = hidden @ layer.weight.T + layer.bias
        pre_activations.append(z_)
        hidden = np.maximum(z_, 0.) if layer.activation == "relu" else z_
        activations.append(hidden)
    features = l2_normalize(hidden)
    cache = ForwardCache(model, x_matrix, pre_activations, activations, hidden, single)
    return (features[0] if single else features), cache


def encoder_backward(model: EncoderModel, cache: ForwardCache, upstream):
    """
    Reverse-mode gradients of a scalar loss through the normalization layer and the MLP.

    :param upstream: dLoss/df, shaped like the forward output
    :return: (param_grads, input_grad); param_grads = [(dW, db), ..] per layer
    """
    if cache.model_id != id(model) or cache.model_version != model.version:
        raise CacheMismatch("forward cache was produced by a different or since-updated model")
    upstream = as_vector(upstream)
    upstream_matrix = upstream[np.newaxis, :] if upstream.ndim == 1 else upstream
    if upstream_matrix.shape != cache.raw_output.shape:
        raise CacheMismatch(
            f"upstream gradient {upstream.shape} does not match forward output {cache.raw_output.shape}")
    d_hidden = l2_normalize_backward(cache.raw_output, upstream_matrix)
    param_grads = [None] * len(model.layers)
    for go_l in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[go_l]
        if layer.activation == "relu":
            d_z = d_hidden * (cache.pre_activations[go_l] > 0)
        else:
            d_z = d_hidden
        param_grads[go_l] = (d_z.T @ cache.activations[go_l], d_z.sum(axis=0))
        d_hidden = d_z @ layer.weight
    input_grad = d_hidden[0] if cache.single else d_hidden
    return param_grads, input_grad


class OptimizerState(object):
    """
    SGD with momentum; weight decay applies to weights only, not biases.
    """
    def __init__(self, model: EncoderModel, lr=0.003, momentum=0.9, weight_decay=5e-4):
        if not lr > 0:
            raise InvalidConfig(f"learning rate must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise InvalidConfig(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise InvalidConfig(f"weight decay must be non-negative, got {weight_decay}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [(np.zeros_like(w_), np.zeros_like(b_)) for w_, b_ in model.parameters()]

    def to_dict(self):
        return {
            "lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
            "velocities": [{"weight": [float(v_) for v_ in v_w.reshape(-1)], "bias": [float(v_) for v_ in v_b]}
                           for v_w, v_b in self.velocities]}

    @classmethod
    def from_dict(cls, model: EncoderModel, state_dict):
        state = cls(model, state_dict["lr"], state_dict["momentum"], state_dict["weight_decay"])
        if len(state_dict["velocities"]) != len(state.velocities):
            raise DimensionMismatch("optimizer state does not belong to this model")
        for (v_w, v_b), saved in zip(state.velocities, state_dict["velocities"]):
            if len(saved["weight"]) != v_w.size or len(saved["bias"]) != v_b.size:
                raise DimensionMismatch("optimizer velocity shapes do not match the model")
            v_w[...] = np.array(saved["weight"], dtype=np.float64).reshape(v_w.shape)
            v_b[...] = saved["bias"]
        return state


def check_grad_shapes(params, grads):
    if len(grads) != len(params):
        raise DimensionMismatch(f"{len(grads)} gradient pairs for {len(params)} layers")
    for (w_, b_), (gw_, gb_) in zip(params, grads):
        if np.shape(gw_) != w_.shape or np.shape(gb_) != b_.shape:
            raise DimensionMismatch(
                f"gradient shapes {np.shape(gw_)}/{np.shape(gb_)} do not match parameters {w_.shape}/{b_.shape}")


def sgd_step(model: EncoderModel, state: OptimizerState, param_grads) -> Tuple[EncoderModel, OptimizerState]:
    """
    g = grad + weight_decay * param; velocity = momentum * velocity + g; param -= lr * velocity.
    Parameters and velocities are updated in place.
    """
    params = model.parameters()
    check_grad_shapes(params, param_grads)
    if len(state.velocities) != len(params):
        raise DimensionMismatch("optimizer state does not belong to this model")
    for (weight, bias), (g_weight, g_bias), (v_weight, v_bias) in zip(params, param_grads, state.velocities):
        g_weight = g_weight + state.weight_decay * weight
        v_weight *= state.momentum
        v_weight += g_weight
        v_bias *= state.momentum
        v_bias += g_bias
        weight -= state.lr * v_weight
        bias -= state.lr * v_bias
    model.version += 1
    return model, state


def build_param_vector(model: EncoderModel) -> np.ndarray:
    """flat view of all parameters, layer by layer (weight then bias)"""
    return np.concatenate([np.concatenate([w_.reshape(-1), b_]) for w_, b_ in model.parameters()])


def load_param_vector(model: EncoderModel, vector) -> EncoderModel:
    vector = as_vector(vector)
    start = 0
    for weight, bias in model.parameters():
        weight[...] = vector[start: start + weight.size].reshape(weight.shape)
        start += weight.size
        bias[...] = vector[start: start + bias.size]
        start += bias.size
    if start != vector.size:
        raise DimensionMismatch(f"parameter vector of {vector.size} values for a model with {start}")
    model.version += 1
    return model


def flatten_grads(param_grads) -> np.ndarray:
    return np.concatenate([np.concatenate([np.reshape(gw_, -1), np.reshape(gb_, -1)]) for gw_, gb_ in param_grads])


def merge_grads(grads_a, grads_b):
    return [(gw_a + gw_b, gb_a + gb_b) for (gw_a, gb_a), (gw_b, gb_b) in zip(grads_a, grads_b)]


def zero_grads(model: EncoderModel):
    return [(np.zeros_like(w_), np.zeros_like(b_)) for w_, b_ in model.parameters()]

