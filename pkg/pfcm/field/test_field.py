"""Testes para o pré-condicionamento, denoisers, drifts e checkpoints."""

import math

import pytest
import torch

from pfcm.core.service import build_schedule
from pfcm.exceptions import ArtifactIOError, MetadataMismatchError
from pfcm.field.repository import (
    checkpoint_digest,
    load_checkpoint,
    save_checkpoint,
    state_digest,
)
from pfcm.field.service import (
    IdealPointDenoiser,
    build_denoiser,
    build_meta,
    coefficients,
    edm_precondition,
    f_apply,
    ideal_field_single_point,
    model_device,
    phi_edm,
    phi_pfgmpp,
    precondition,
)


@pytest.fixture
def theta(config):
    torch.manual_seed(0)
    return build_denoiser(build_meta(config, 'pfcm', 'consistency'))


@pytest.fixture
def phi(config):
    torch.manual_seed(1)
    return build_denoiser(build_meta(config, 'pfgmpp', 'edm'))


def randomize(model):
    generator = torch.Generator().manual_seed(2)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(0.1 * torch.randn(p.shape, generator=generator))
    return model


def test_boundary_coefficients():
    c = precondition(0.002, 0.5, 0.002)

    assert c.c_skip == 1.0
    assert c.c_out == 0.0


def test_skip_vanishes_at_large_sigma():
    assert precondition(1e8, 0.5, 0.002).c_skip < 1e-15


def test_coefficients_by_formula():
    c = precondition(1.0, 0.5, 0.002)

    assert c.c_skip == pytest.approx(0.25 / (0.998**2 + 0.25))
    assert c.c_out == pytest.approx(0.5 * 0.998 / math.sqrt(1.25))
    assert c.c_in == pytest.approx(1 / math.sqrt(1.25))
    assert c.c_noise == 0.0


def test_edm_coefficients():
    c = edm_precondition(0.5, 0.5)

    assert c.c_skip == pytest.approx(0.5)
    assert c.c_out == pytest.approx(0.25 / math.sqrt(0.5))


@pytest.mark.parametrize(
    ('kind', 'scalar'),
    [
        ('consistency', lambda s: precondition(s, 0.5, 0.002)),
        ('edm', lambda s: edm_precondition(s, 0.5)),
    ],
)
def test_batched_coefficients_match_scalar_ones(kind, scalar):
    sigmas = torch.tensor([0.002, 0.3, 1.0, 80.0], dtype=torch.float64)

    batched = coefficients(kind, sigmas, 0.5, 0.002)

    for k, sigma in enumerate(sigmas.tolist()):
        expected = scalar(sigma)
        assert [float(c[k]) for c in batched] == pytest.approx(
            list(expected)
        )


def test_precondition_rejects_sigma_below_minimum():
    with pytest.raises(ValueError, match='below sigma_min'):
        precondition(0.001, 0.5, 0.002)


def test_boundary_condition_holds_for_any_weights(theta, x0, noisy):
    randomize(theta)

    out = f_apply(theta, noisy, theta.meta.sigma_min, x0)

    assert torch.equal(out, noisy)


def test_zero_network_gives_skip_connection(theta, x0, noisy):
    with torch.no_grad():
        for p in theta.parameters():
            p.zero_()
    c = precondition(1.0, 0.5, theta.meta.sigma_min)

    out = f_apply(theta, noisy, 1.0, x0)

    torch.testing.assert_close(out, c.c_skip * noisy)


class ConstantNet(torch.nn.Module):
    def forward(self, x, c_noise):
        return torch.ones_like(x[:, :1])


def test_denoiser_combines_skip_and_network_output(theta, x0, noisy):
    theta.net = ConstantNet()
    c = precondition(2.0, 0.5, theta.meta.sigma_min)

    out = f_apply(theta, noisy, 2.0, x0)

    torch.testing.assert_close(out, c.c_skip * noisy + c.c_out)


def test_model_device(theta):
    assert model_device(theta) == torch.device('cpu')
    assert model_device(theta.to('meta')).type == 'meta'
    assert model_device(torch.nn.Identity()) == torch.device('cpu')


def test_fixed_weights_are_reproducible(config, x0, noisy):
    outputs = []
    for _ in range(2):
        torch.manual_seed(5)
        model = build_denoiser(build_meta(config, 'pfcm', 'consistency'))
        randomize(model)
        outputs.append(f_apply(model, noisy, 3.0, x0))

    assert torch.equal(*outputs)


def test_f_apply_counts_evaluations(theta, x0, noisy):
    batch = noisy.expand(3, 1, 16, 16)

    out = f_apply(theta, batch, torch.tensor([1.0, 2.0, 3.0]), batch)

    assert out.shape == (3, 1, 16, 16)
    assert theta.nfe == 1


def test_f_apply_shape_mismatch(theta, noisy):
    with pytest.raises(ValueError, match='shape mismatch'):
        f_apply(theta, noisy, 1.0, noisy[:8, :8])


def test_f_apply_checks_d(theta, noisy):
    with pytest.raises(MetadataMismatchError, match='D=2048'):
        f_apply(theta, noisy, 1.0, noisy, D=2048.0)


def test_conditional_denoiser_needs_y(theta, noisy):
    with pytest.raises(ValueError, match='needs y'):
        f_apply(theta, noisy, 1.0)


def test_unconditional_denoiser(config, noisy):
    meta = build_meta(
        config.model_copy(update={'conditioning': 'none'}),
        'pfcm',
        'consistency',
    )
    model = build_denoiser(meta)

    assert model.net.conv_in.in_channels == 1
    assert f_apply(model, noisy, 1.0).shape == noisy.shape


def test_toy_network_has_ten_weights(config, toy_arch):
    model = build_denoiser(build_meta(config, 'pfgmpp', 'edm', toy_arch))

    assert sum(p.numel() for p in model.parameters()) == 10


def test_dropout_only_for_pretraining(config):
    assert build_meta(config, 'pfgmpp', 'edm').arch.dropout == 0.1
    assert build_meta(config, 'pfcm', 'consistency').arch.dropout == 0.0


def test_single_point_drift(phi_point, x0, noisy):
    drift = phi_pfgmpp(phi_point, noisy, 2.0, noisy)

    torch.testing.assert_close(
        drift, ideal_field_single_point(noisy, 2.0, x0)
    )
    torch.testing.assert_close(drift, (noisy - x0) / 2.0)


def test_gaussian_drift_agrees_on_single_point(config, x0, noisy):
    meta = build_meta(
        config.model_copy(update={'d': math.inf}), 'pfgmpp', 'edm'
    )
    ideal = IdealPointDenoiser(x0, meta)

    torch.testing.assert_close(
        phi_edm(ideal, noisy, 2.0, noisy),
        phi_pfgmpp(ideal, noisy, 2.0, noisy),
    )


def test_drift_vanishes_on_the_data_point(phi_point, x0):
    assert torch.count_nonzero(phi_pfgmpp(phi_point, x0, 1.0, x0)) == 0


def test_drift_is_linear_in_the_displacement(phi_point, x0, noisy):
    direction = noisy - x0
    near = phi_pfgmpp(phi_point, x0 + direction, 1.0, x0)
    far = phi_pfgmpp(phi_point, x0 + 3 * direction, 1.0, x0)

    torch.testing.assert_close(far, 3 * near)


def test_drift_is_finite_at_sigma_max(phi, noisy):
    randomize(phi)
    x = 80.0 * torch.randn(16, 16)

    assert torch.isfinite(phi_pfgmpp(phi, x, 80.0, noisy)).all()


def test_single_point_flow_is_a_straight_line(phi_point, x0):
    x_start = x0.double() + 80.0 * torch.randn(16, 16, dtype=torch.float64)
    sched = build_schedule(0.002, 80.0, 7.0, 200)

    x = x_start
    for s_cur, s_next in zip(sched.sigmas, sched.sigmas[1:]):
        x = x + (s_next - s_cur) * phi_pfgmpp(phi_point, x, s_cur, x0)

    expected = x0.double() + 0.002 / 80.0 * (x_start - x0.double())
    assert float((x - expected).norm() / expected.norm()) < 1e-4


def test_single_point_field_is_singular_at_zero(x0):
    with pytest.raises(ValueError, match='singular'):
        ideal_field_single_point(x0, 0.0, x0)


def test_checkpoint_round_trip(tmp_path, theta, x0, noisy):
    randomize(theta)
    path = tmp_path / 'pfcm.pt'

    digest = save_checkpoint(path, theta)
    loaded = load_checkpoint(path, 'pfcm', expected=theta.meta)

    assert loaded.meta == theta.meta
    assert digest == state_digest(loaded) == checkpoint_digest(path)
    torch.testing.assert_close(
        f_apply(loaded, noisy, 1.0, x0), f_apply(theta, noisy, 1.0, x0)
    )


def test_gaussian_limit_checkpoint(tmp_path, config):
    meta = build_meta(
        config.model_copy(update={'d': math.inf}), 'pfgmpp', 'edm'
    )
    save_checkpoint(tmp_path / 'edm.pt', build_denoiser(meta))

    assert math.isinf(load_checkpoint(tmp_path / 'edm.pt').meta.D)


def test_checkpoint_stage_is_checked(tmp_path, phi):
    save_checkpoint(tmp_path / 'phi.pt', phi)

    with pytest.raises(MetadataMismatchError, match='expected pfcm'):
        load_checkpoint(tmp_path / 'phi.pt', 'pfcm')


def test_checkpoint_compatibility_is_checked(tmp_path, config, theta):
    save_checkpoint(tmp_path / 'pfcm.pt', theta)
    other = build_meta(
        config.model_copy(update={'d': 2048.0, 'n_steps': 18}),
        'pfcm',
        'consistency',
    )

    with pytest.raises(MetadataMismatchError, match='D, .*n_steps'):
        load_checkpoint(tmp_path / 'pfcm.pt', expected=other)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ArtifactIOError, match='missing checkpoint'):
        load_checkpoint(tmp_path / 'absent.pt')


def test_corrupt_checkpoint(tmp_path):
    path = tmp_path / 'broken.pt'
    path.write_bytes(b'not a checkpoint')

    with pytest.raises(ArtifactIOError, match='unreadable'):
        load_checkpoint(path)
