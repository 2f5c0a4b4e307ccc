"""
Pruebas de las redes: conteos de parámetros, bloques GC/BR, generador y discriminador
"""
import numpy as np
import pytest

from core.errors import ShapeError
from core.layers import conv3d
from core.tensor import Tensor, backward, gradcheck, multiply, no_grad, reduce, tensor_new
from models import ConvSpec, GCBlockSpec
from services.network_service import (
    RESNET50_2D_CONV_SHAPES,
    br_block,
    br_specs,
    build_discriminator,
    build_generator,
    count_conv_layers,
    count_parameters,
    gc_block,
    init_block_params,
    model_summary,
)

RESNET50_ENCODER_PARAMS = 23_507_904


def zero_biases(params):
    for name, p in params.items():
        if name.endswith(".bias"):
            params[name] = Tensor(np.zeros_like(p.data))
    return params


@pytest.fixture(scope="module")
def paper_generator():
    return build_generator("paper", materialize=False)


@pytest.fixture(scope="module")
def tiny_generator():
    return build_generator("tiny", seed=0)


class TestParameterCounts:
    def test_conv_spec_count(self):
        """3x3x1 de 4 a 8 canales con sesgo: 9*4*8 + 8"""
        spec = ConvSpec(in_channels=4, out_channels=8, kernel=(3, 3, 1), padding=(1, 1, 0), has_bias=True)
        assert count_parameters(spec) == 296
        assert spec.output_extent((5, 10, 10)) == (5, 10, 10)

    def test_conv1_count(self, paper_generator):
        assert paper_generator.conv_specs["conv1"].parameter_count() == 9408

    def test_encoder_matches_resnet50(self, paper_generator):
        names = paper_generator.encoder_conv_names()
        assert len(names) == 53
        total = count_parameters(paper_generator, names)
        assert abs(total - RESNET50_ENCODER_PARAMS) / RESNET50_ENCODER_PARAMS < 1e-4

    def test_per_layer_matches_2d(self, paper_generator):
        """Cada convolución 3D tiene tantos pesos como su par 2D"""
        for name, (out_ch, in_ch, kh, kw) in RESNET50_2D_CONV_SHAPES.items():
            assert paper_generator.conv_specs[name].parameter_count() == out_ch * in_ch * kh * kw, name

    def test_layer_counts(self, paper_generator):
        discriminator = build_discriminator("paper", materialize=False)
        assert count_conv_layers(paper_generator) == 100
        assert count_conv_layers(discriminator) == 6

    def test_presets_share_structure(self, paper_generator, tiny_generator):
        assert list(paper_generator.conv_specs) == list(tiny_generator.conv_specs)
        assert count_parameters(tiny_generator) < count_parameters(paper_generator) / 40

    def test_summary(self, paper_generator):
        summary = model_summary(paper_generator, build_discriminator("paper", materialize=False))
        assert [row[0] for row in summary.rows] == [
            "3D ResNet encoder", "3D Encoder-decoder (G)", "3D GCA-Net (G + D)"
        ]
        assert summary.rows[0][1] == 53
        assert "(ref) ResNet-50" in summary.format_table()

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            build_generator("tiny", gc_kernel=(6, 7, 3), materialize=False)

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            build_generator("huge", materialize=False)


class TestGCBlock:
    def test_equals_dense_separable_kernel(self, rng):
        """Con un canal y sin sesgos, el bloque equivale a una convolución densa"""
        spec = GCBlockSpec(in_channels=1, mid_channels=1, kernel=(5, 3, 3))
        params = zero_biases(init_block_params(spec.branch_specs(), rng, "gc", "f64"))
        w = {name: params[f"gc.{name}.weight"].data.ravel() for name in ("a1", "a2", "a3", "b1", "b2", "b3")}
        kernel = np.einsum("z,y,x->zyx", w["a3"], w["a2"], w["a1"])
        kernel += np.einsum("z,y,x->zyx", w["b1"], w["b2"], w["b3"])
        kernel[1, 1, 2] += params["gc.proj.weight"].data.item()

        x = Tensor(rng.normal(size=(1, 1, 4, 6, 7)), dtype="f64")
        dense = ConvSpec.same(1, 1, (5, 3, 3))
        expected = conv3d(x, dense, Tensor(kernel[np.newaxis, np.newaxis], dtype="f64"))
        assert np.allclose(gc_block(x, spec, params).data, expected.data)

    def test_gradcheck(self, rng):
        spec = GCBlockSpec(in_channels=2, mid_channels=2, kernel=(3, 3, 3))
        params = init_block_params(spec.branch_specs(), rng, "gc", "f64")
        for name, p in params.items():
            if name.endswith(".bias"):
                p.data[...] = rng.normal(size=p.shape)
        x = Tensor(rng.normal(size=(1, 2, 3, 4, 5)), dtype="f64")
        r = Tensor(rng.normal(size=(1, 2, 3, 4, 5)), dtype="f64")
        assert gradcheck(lambda t: reduce(multiply(gc_block(t, spec, params), r), "sum"), x) < 1e-6

    def test_channel_mismatch(self, rng):
        spec = GCBlockSpec(in_channels=2, mid_channels=2)
        params = init_block_params(spec.branch_specs(), rng, "gc")
        with pytest.raises(ShapeError):
            gc_block(tensor_new((1, 3, 3, 8, 8)), spec, params)

    def test_translation_covariance(self, rng):
        """Desplazar la entrada desplaza la salida (lejos de los bordes)"""
        spec = GCBlockSpec(in_channels=1, mid_channels=1, kernel=(3, 3, 3))
        params = zero_biases(init_block_params(spec.branch_specs(), rng, "gc", "f64"))
        params.update(zero_biases(init_block_params(br_specs(1), rng, "br", "f64")))
        x = np.zeros((1, 1, 7, 9, 15))
        x[0, 0, 3, 4, 5:7] = rng.normal(size=2)
        shifted = np.roll(x, 2, axis=4)

        def block(data):
            return br_block(gc_block(Tensor(data, dtype="f64"), spec, params), params).data

        assert np.allclose(np.roll(block(x), 2, axis=4), block(shifted))


class TestBRBlock:
    def test_zero_weights_is_identity(self, rng):
        params = init_block_params(br_specs(3), rng, "br", "f64")
        for p in params.values():
            p.data[...] = 0.0
        x = Tensor(rng.normal(size=(1, 3, 2, 4, 4)), dtype="f64")
        assert np.array_equal(br_block(x, params).data, x.data)

    def test_gradcheck(self, rng):
        params = init_block_params(br_specs(2), rng, "br", "f64")
        x = Tensor(rng.normal(size=(1, 2, 3, 4, 4)), dtype="f64")
        r = Tensor(rng.normal(size=(1, 2, 3, 4, 4)), dtype="f64")
        assert gradcheck(lambda t: reduce(multiply(br_block(t, params), r), "sum"), x) < 1e-5

    def test_channel_mismatch(self, rng):
        params = init_block_params(br_specs(2), rng, "br")
        with pytest.raises(ShapeError):
            br_block(tensor_new((1, 3, 2, 4, 4)), params)


class TestGenerator:
    def test_output_shape_and_range(self, tiny_generator):
        x = tensor_new((1, 1, 8, 32, 32), fill="gaussian", seed=1)
        with no_grad():
            out = tiny_generator.forward(x)
        assert out.shape == (1, 1, 8, 32, 32)
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_eval_mode(self, tiny_generator):
        x = tensor_new((2, 1, 8, 32, 32), fill="gaussian", seed=2)
        tiny_generator.eval()
        try:
            with no_grad():
                first = tiny_generator.forward(x).data
                second = tiny_generator.forward(x).data
        finally:
            tiny_generator.train()
        assert np.array_equal(first, second)

    def test_extents_must_be_divisible(self, tiny_generator):
        with pytest.raises(ShapeError):
            tiny_generator.forward(tensor_new((1, 1, 8, 32, 30)))
        with pytest.raises(ShapeError):
            tiny_generator.forward(tensor_new((1, 2, 8, 32, 32)))

    def test_gradients_reach_encoder(self):
        G = build_generator("tiny", seed=3)
        x = tensor_new((1, 1, 8, 32, 32), fill="gaussian", seed=4)
        backward(reduce(G.forward(x), "mean"))
        assert G.params["conv1.weight"].grad is not None
        assert np.any(G.params["final.weight"].grad != 0)


class TestDiscriminator:
    def test_output_is_one_logit_per_item(self):
        D = build_discriminator("tiny", seed=1)
        seg = tensor_new((2, 1, 8, 32, 32), fill="uniform", seed=5)
        x = tensor_new((2, 1, 8, 32, 32), fill="gaussian", seed=6)
        with no_grad():
            logits = D.forward(seg, x)
        assert logits.shape == (2,)
        assert np.all(np.abs(logits.data) < 1.0)

    def test_zero_weights_give_zero_logit(self):
        D = build_discriminator("tiny", seed=1)
        for p in D.parameters():
            p.data[...] = 0.0
        seg = tensor_new((1, 1, 8, 32, 32), fill="uniform", seed=5)
        x = tensor_new((1, 1, 8, 32, 32), fill="gaussian", seed=6)
        assert np.all(D.forward(seg, x).data == 0.0)

    def test_shape_mismatch(self):
        D = build_discriminator("tiny", seed=1)
        with pytest.raises(ShapeError):
            D.forward(tensor_new((1, 1, 8, 32, 32)), tensor_new((1, 1, 8, 32, 64)))

    def test_gradcheck_through_segmentation_input(self, rng):
        """El gradiente que recibe el generador a través del discriminador"""
        D = build_discriminator("tiny", seed=2, dtype="f64")
        D.params["d6.weight"].data[...] = rng.normal(size=D.params["d6.weight"].shape)
        x = Tensor(rng.normal(size=(1, 1, 4, 8, 8)), dtype="f64")
        seg = Tensor(rng.uniform(0.05, 0.95, size=(1, 1, 4, 8, 8)), dtype="f64")
        assert gradcheck(lambda s: reduce(D.forward(s, x), "sum"), seg) < 1e-4


class TestDecoderWidth:
    def test_tiny_preset_uses_eight_channels(self, tiny_generator):
        assert tiny_generator.decoder_width == 8
        for stage in ("res2", "res3", "res4", "res5"):
            assert tiny_generator.conv_specs[f"dec.{stage}.gc.proj"].out_channels == 8
            assert tiny_generator.conv_specs[f"dec.{stage}.br.conv2"].out_channels == 8
        assert tiny_generator.conv_specs["final"].in_channels == 8

    def test_paper_preset_uses_thirty_two_channels(self, paper_generator):
        assert paper_generator.decoder_width == 32
        assert paper_generator.conv_specs["dec.up0.br.conv1"].in_channels == 32


def test_generator_translation_covariance():
    """Un desplazamiento en z de un periodo de stride (8) desplaza el interior de la salida"""
    G = build_generator("tiny", seed=5, dtype="f64").eval()
    rng = np.random.default_rng(8)
    data = rng.normal(size=(1, 1, 128, 32, 32))
    shifted = np.roll(data, 8, axis=2)
    with no_grad():
        out = G.forward(Tensor(data, dtype="f64")).data
        out_shifted = G.forward(Tensor(shifted, dtype="f64")).data
    # el campo receptivo en z no supera 40 vóxeles
    interior = slice(56, 80)
    before = slice(48, 72)
    assert np.allclose(out_shifted[:, :, interior], out[:, :, before], atol=1e-5)
