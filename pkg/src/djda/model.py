"""Network assembly: extractor, emotion classifier and the adversarial branches.

Branch naming used everywhere (parameter names, gradients, ablations):

    extractor   x -> f
    classifier  f -> emotion logits (c)
    st          f -> source/target logits (2)
    sp          f_s -> speaker logits (k)
    cst.<m>     p_m * f -> source/target logits (2), one per emotion class
    csp.<m>     p_m * f_s -> speaker logits (k), one per emotion class
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ACTIVATIONS, Layer, Stack, as_matrix, softmax
from .errors import ShapeError, ValidationError
from .rng import SplitMix64, derive_seed

CHECKPOINT_FORMAT = "djda-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int
    c: int
    k: int
    feature_dims: list = field(default_factory=lambda: [64, 32])
    classifier_dims: list = field(default_factory=list)
    discriminator_dims: list = field(default_factory=lambda: [16])
    activation: str = "leaky_relu"
    seed: int = 0

    def validate(self):
        if self.c < 2:
            raise ValidationError(f"c must be >= 2, got {self.c}")
        if self.k < 2:
            raise ValidationError(f"k must be >= 2, got {self.k}")
        if not self.feature_dims:
            raise ValidationError("feature_dims must name at least the feature width")
        widths = [self.input_dim, *self.feature_dims, *self.classifier_dims,
                  *self.discriminator_dims]
        if any(int(w) < 1 for w in widths):
            raise ValidationError(f"all widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        return self

    @property
    def feature_width(self):
        return self.feature_dims[-1]


class Model:
    def __init__(self, config, extractor, classifier, st, sp, cst, csp):
        self.config = config
        self.extractor = extractor
        self.classifier = classifier
        self.st = st
        self.sp = sp
        self.cst = list(cst)
        self.csp = list(csp)

    def stacks(self):
        """(prefix, Stack) pairs in a fixed order."""
        yield "extractor", self.extractor
        yield "classifier", self.classifier
        yield "st", self.st
        yield "sp", self.sp
        for m, s in enumerate(self.cst):
            yield f"cst.{m}", s
        for m, s in enumerate(self.csp):
            yield f"csp.{m}", s

    def parameters(self):
        out = {}
        for prefix, stack in self.stacks():
            out.update(stack.parameters(prefix))
        return out

    def layers_by_name(self):
        out = {}
        for prefix, stack in self.stacks():
            for i, layer in enumerate(stack.layers):
                out[f"{prefix}.{i}.weight"] = layer
                out[f"{prefix}.{i}.bias"] = layer
        return out

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())

    def copy(self):
        return model_from_dict(model_to_dict(self))


def build_model(config: ModelConfig) -> Model:
    """Deterministically initialise every stack from ``config.seed``."""
    config.validate()
    rng = SplitMix64(derive_seed(config.seed, 0xD1DA))
    act = config.activation
    fw = config.feature_width
    extractor = Stack.init([config.input_dim, *config.feature_dims], act, rng, last_activation=act)
    classifier = Stack.init([fw, *config.classifier_dims, config.c], act, rng)

    def disc(out):
        return Stack.init([fw, *config.discriminator_dims, out], act, rng)

    st, sp = disc(2), disc(config.k)
    cst = [disc(2) for _ in range(config.c)]
    csp = [disc(config.k) for _ in range(config.c)]
    return Model(config, extractor, classifier, st, sp, cst, csp)


def forward_features(model, x):
    """``f = G_f(x)``. Returns ``(f, caches)``; pass the caches to backprop."""
    x = as_matrix(x)
    if x.shape[1] != model.config.input_dim:
        raise ShapeError(f"input has {x.shape[1]} columns, model expects {model.config.input_dim}")
    return model.extractor.forward(x)


def classifier_logits(model, f):
    f = as_matrix(f, "f")
    if f.shape[1] != model.config.feature_width:
        raise ShapeError(f"features have width {f.shape[1]}, expected {model.config.feature_width}")
    return model.classifier.forward(f)


def predict_emotion(model, f):
    """Softmax class probabilities from the classifier."""
    logits, _ = classifier_logits(model, f)
    return softmax(logits)


def branch_stack(model, branch, m=None):
    if branch == "st":
        return model.st
    if branch == "sp":
        return model.sp
    if branch in ("cst", "csp"):
        stacks = model.cst if branch == "cst" else model.csp
        if m is None or not 0 <= m < len(stacks):
            raise ValidationError(f"class index m={m} out of range for branch {branch!r}")
        return stacks[m]
    raise ValidationError(f"unknown branch {branch!r}")


def discriminate(model, branch, f, m=None):
    """Run one discriminator. For ``cst``/``csp`` the caller passes ``p_m * f``.

    Returns ``(logits, caches)``.
    """
    stack = branch_stack(model, branch, m)
    f = as_matrix(f, "f")
    if f.shape[1] != model.config.feature_width:
        raise ShapeError(f"features have width {f.shape[1]}, expected {model.config.feature_width}")
    return stack.forward(f)


# -- checkpoints ------------------------------------------------------------
#
# JSON document:
#   {"format": "djda-checkpoint", "version": 1, "config": {...ModelConfig...},
#    "stacks": {"<prefix>": [{"activation": str, "weight": [[...], ...],
#                             "bias": [...]}, ...], ...}}
# Floats are written with Python's shortest round-trip repr, so load(save(m))
# restores every float64 bit-exactly.


def model_to_dict(model):
    stacks = {}
    for prefix, stack in model.stacks():
        stacks[prefix] = [
            {"activation": layer.activation, "weight": layer.weight.tolist(),
             "bias": layer.bias.tolist()}
            for layer in stack.layers
        ]
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "config": asdict(model.config), "stacks": stacks}


def model_from_dict(doc):
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError("not a djda checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {doc.get('version')}")
    config = ModelConfig(**doc["config"]).validate()

    def load(prefix):
        try:
            layers = doc["stacks"][prefix]
        except KeyError:
            raise ValidationError(f"checkpoint is missing stack {prefix!r}") from None
        return Stack(Layer(np.array(l["weight"], dtype=np.float64).reshape(len(l["weight"]), -1),
                           np.array(l["bias"], dtype=np.float64), l["activation"])
                     for l in layers)

    return Model(config, load("extractor"), load("classifier"), load("st"), load("sp"),
                 [load(f"cst.{m}") for m in range(config.c)],
                 [load(f"csp.{m}") for m in range(config.c)])


def save_checkpoint(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
