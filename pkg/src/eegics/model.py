"""Layer descriptions and the teacher/student architecture family."""

from dataclasses import dataclass, replace
from enum import IntEnum


class LayerKind(IntEnum):
    TEMPORAL_CONV = 0
    DEPTHWISE_TEMPORAL_CONV = 1
    POINTWISE_CONV = 2
    RELU = 3
    TEMPORAL_AVG_POOL = 4
    GLOBAL_AVG_POOL = 5
    DENSE = 6


CONV_KINDS = (LayerKind.TEMPORAL_CONV, LayerKind.DEPTHWISE_TEMPORAL_CONV,
              LayerKind.POINTWISE_CONV)


class SpecError(ValueError):
    """Raised for an inconsistent model specification."""


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    maps_in: int
    maps_out: int
    kernel: int = 0
    pool: int = 0

    def param_shapes(self):
        """Parameter shapes in declaration order (weight, bias)."""
        k = self.kind
        if k == LayerKind.TEMPORAL_CONV:
            return [(self.maps_out, self.maps_in, self.kernel), (self.maps_out,)]
        if k == LayerKind.DEPTHWISE_TEMPORAL_CONV:
            return [(self.maps_out, self.kernel), (self.maps_out,)]
        if k in (LayerKind.POINTWISE_CONV, LayerKind.DENSE):
            return [(self.maps_out, self.maps_in), (self.maps_out,)]
        return []

    def fan_in(self):
        k = self.kind
        if k == LayerKind.TEMPORAL_CONV:
            return self.maps_in * self.kernel
        if k == LayerKind.DEPTHWISE_TEMPORAL_CONV:
            return self.kernel
        return self.maps_in


def temporal_conv(maps_in, maps_out, kernel):
    return LayerSpec(LayerKind.TEMPORAL_CONV, maps_in, maps_out, kernel=kernel)


def depthwise_conv(maps, kernel):
    return LayerSpec(LayerKind.DEPTHWISE_TEMPORAL_CONV, maps, maps, kernel=kernel)


def pointwise_conv(maps_in, maps_out):
    return LayerSpec(LayerKind.POINTWISE_CONV, maps_in, maps_out, kernel=1)


def relu(maps):
    return LayerSpec(LayerKind.RELU, maps, maps)


def avg_pool(maps, width):
    return LayerSpec(LayerKind.TEMPORAL_AVG_POOL, maps, maps, pool=width)


def global_avg_pool(maps):
    return LayerSpec(LayerKind.GLOBAL_AVG_POOL, maps, maps)


def dense(maps_in, n_out=2):
    return LayerSpec(LayerKind.DENSE, maps_in, n_out)


@dataclass(frozen=True)
class ModelSpec:
    """Input extents plus an ordered layer list ending in GAP -> Dense(2).

    ``in_channels``/``in_timepoints`` of 0 mean "unconstrained"; models read
    back from a file carry no input extents because no kernel depends on them.
    """

    in_channels: int
    in_timepoints: int
    layers: tuple
    n_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self):
        layers = self.layers
        if self.n_classes != 2:
            raise SpecError("exactly two classes are supported")
        if len(layers) < 2:
            raise SpecError("a model needs at least GlobalAvgPool and Dense")
        gaps = [i for i, l in enumerate(layers) if l.kind == LayerKind.GLOBAL_AVG_POOL]
        if gaps != [len(layers) - 2]:
            raise SpecError("exactly one GlobalAvgPool is required, second to last")
        last = layers[-1]
        if last.kind != LayerKind.DENSE or last.maps_out != self.n_classes:
            raise SpecError("the network must end in Dense(K -> 2)")
        if any(l.kind == LayerKind.DENSE for l in layers[:-1]):
            raise SpecError("Dense is only allowed as the final layer")
        maps = 1
        for i, l in enumerate(layers):
            if l.maps_in != maps:
                raise SpecError(f"layer {i} ({l.kind.name}) expects {l.maps_in} maps, gets {maps}")
            if l.kind in (LayerKind.TEMPORAL_CONV, LayerKind.DEPTHWISE_TEMPORAL_CONV) and l.kernel < 1:
                raise SpecError(f"layer {i} ({l.kind.name}) needs kernel >= 1")
            if l.kind == LayerKind.DEPTHWISE_TEMPORAL_CONV and l.maps_out != l.maps_in:
                raise SpecError(f"layer {i}: depthwise conv keeps the map count")
            if l.kind == LayerKind.POINTWISE_CONV and l.kernel != 1:
                raise SpecError(f"layer {i}: pointwise conv has kernel length 1")
            if l.kind in (LayerKind.RELU, LayerKind.TEMPORAL_AVG_POOL,
                          LayerKind.GLOBAL_AVG_POOL) and l.maps_out != l.maps_in:
                raise SpecError(f"layer {i} ({l.kind.name}) cannot change the map count")
            if l.kind == LayerKind.TEMPORAL_AVG_POOL and l.pool < 1:
                raise SpecError(f"layer {i}: pool width must be >= 1")
            maps = l.maps_out
        if self.in_timepoints and self.in_timepoints % self.pool_product():
            raise SpecError(
                f"timepoints {self.in_timepoints} not divisible by pooling product "
                f"{self.pool_product()}")

    def pool_product(self):
        p = 1
        for l in self.layers:
            if l.kind == LayerKind.TEMPORAL_AVG_POOL:
                p *= l.pool
        return p

    @property
    def feature_maps(self):
        """Map count K3 entering the GAP head."""
        return self.layers[-2].maps_in

    def reduced_timepoints(self, timepoints=None):
        t = timepoints or self.in_timepoints
        return t // self.pool_product()

    def param_shapes(self):
        return [l.param_shapes() for l in self.layers]

    def n_params(self):
        total = 0
        for shapes in self.param_shapes():
            for s in shapes:
                n = 1
                for d in s:
                    n *= d
                total += n
        return total

    def with_input(self, channels, timepoints=None):
        return replace(self, in_channels=channels,
                       in_timepoints=self.in_timepoints if timepoints is None else timepoints)


@dataclass(frozen=True)
class Architecture:
    """Hyperparameters of the default compact-CNN family."""

    conv1_maps: int = 16
    conv1_kernel: int = 16
    pool1: int = 2
    conv2_maps: int = 32
    conv2_kernel: int = 8
    pool2: int = 2
    depthwise_kernel: int = 4
    pointwise_maps: int = 32

    def layers(self):
        a = self
        return (
            temporal_conv(1, a.conv1_maps, a.conv1_kernel), relu(a.conv1_maps),
            avg_pool(a.conv1_maps, a.pool1),
            temporal_conv(a.conv1_maps, a.conv2_maps, a.conv2_kernel), relu(a.conv2_maps),
            avg_pool(a.conv2_maps, a.pool2),
            depthwise_conv(a.conv2_maps, a.depthwise_kernel), relu(a.conv2_maps),
            pointwise_conv(a.conv2_maps, a.pointwise_maps), relu(a.pointwise_maps),
            global_avg_pool(a.pointwise_maps), dense(a.pointwise_maps, 2),
        )


def build_teacher(channels, timepoints, arch=None):
    """Full-channel teacher spec for ``channels`` x ``timepoints`` inputs."""
    if channels < 1:
        raise SpecError(f"channel count must be >= 1, got {channels}")
    if timepoints < 32:
        raise SpecError(f"timepoints must be >= 32, got {timepoints}")
    arch = arch or Architecture()
    return ModelSpec(channels, timepoints, arch.layers())


def build_student(teacher_spec, n_selected):
    """Same family with the input channel count reduced to ``n_selected``.

    Kernels are 1 x k, so only the activation shapes change; every parameter
    shape matches the teacher's.
    """
    c = teacher_spec.in_channels
    if not 1 <= n_selected <= c:
        raise SpecError(f"selected channel count must lie in [1, {c}], got {n_selected}")
    return teacher_spec.with_input(n_selected)
