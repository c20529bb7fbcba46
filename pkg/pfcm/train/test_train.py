"""Testes para o pré-treino do PFGM++ e a destilação de consistência."""

import copy
import math

import pytest
import torch

from pfcm.exceptions import MetadataMismatchError, NumericalError
from pfcm.field.repository import state_digest
from pfcm.field.service import (
    IdealPointDenoiser,
    build_denoiser,
    build_meta,
    f_apply,
)
from pfcm.phantoms.schema import PairedSample
from pfcm.pfkernel.service import perturb
from pfcm.sample.service import pfcm_sample
from pfcm.train.repository import (
    checkpoint_path,
    read_loss_trace,
    write_loss_trace,
)
from pfcm.train.schema import DistillConfig, LossRecord
from pfcm.train.service import (
    METRICS,
    PairedPatchDataset,
    consistency_gap,
    consistency_loss,
    distill,
    distill_step,
    drift_matching_loss,
    ema_update,
    get_metric,
    init_student,
    make_optimizer,
    pfgmpp_loss,
    pretrain,
    pseudo_huber_distance,
    register_metric,
    sample_training_sigma,
)


@pytest.fixture
def distill_config(config):
    return DistillConfig(run=config, mu=0.5, metric='l2')


@pytest.fixture
def point_batch(x0, noisy):
    return x0.expand(2, 1, 16, 16), noisy.expand(2, 1, 16, 16)


@pytest.fixture
def student(phi_point, distill_config):
    torch.manual_seed(0)
    theta = init_student(phi_point, distill_config)
    generator = torch.Generator().manual_seed(1)
    with torch.no_grad():
        for p in theta.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=generator))
    return theta


def params(model):
    return torch.cat([p.detach().flatten() for p in model.parameters()])


def test_metric_registry():
    assert get_metric('l2') is METRICS['l2']
    assert get_metric('pseudo_huber') is pseudo_huber_distance

    with pytest.raises(ValueError, match='unknown metric'):
        get_metric('lpips')


def test_registered_metric_is_available():
    @register_metric('l1_test')
    def l1(a, b):
        return (a - b).abs().flatten(1).mean(dim=1)

    try:
        assert get_metric('l1_test') is l1
    finally:
        METRICS.pop('l1_test')


def test_pseudo_huber_scale():
    a = torch.zeros(1, 1, 16, 16)
    b = torch.full((1, 1, 16, 16), 0.5)
    c = 0.00054 * 16

    expected = math.sqrt(256 * 0.25 + c**2) - c

    assert float(pseudo_huber_distance(a, b)) == pytest.approx(expected)
    assert float(pseudo_huber_distance(a, a)) == pytest.approx(0, abs=1e-9)


def test_training_sigma_is_clamped():
    sigma = sample_training_sigma(0, 10_000, 0.01, 5.0)

    assert sigma.min() >= 0.01
    assert sigma.max() <= 5.0
    assert (sigma == 0.01).any()


def test_dataset_items_are_reproducible(samples):
    dataset = PairedPatchDataset(samples, batch=3, patch=8, seed=0, length=5)

    first, again = dataset[2], dataset[2]

    assert first['clean'].shape == (3, 1, 8, 8)
    assert torch.equal(first['clean'], again['clean'])
    assert torch.equal(first['noisy'], again['noisy'])
    assert not torch.equal(first['clean'], dataset[3]['clean'])


def test_dataset_rejects_empty_training_set():
    with pytest.raises(ValueError, match='empty'):
        PairedPatchDataset([], batch=1, patch=8, seed=0, length=1)


@pytest.mark.parametrize('sigma', [0.002, 0.5, 80.0])
def test_ideal_predictor_has_zero_loss(phi_point, point_batch, sigma):
    clean, noisy = point_batch

    loss = pfgmpp_loss(phi_point, clean, noisy, 128.0, seed=0, sigma=sigma)

    assert float(loss) == pytest.approx(0.0, abs=1e-10)


def test_loss_checks_d(phi_point, point_batch):
    with pytest.raises(MetadataMismatchError):
        pfgmpp_loss(phi_point, *point_batch, D=2048.0, seed=0)


def test_antithetic_draws_have_equal_expected_loss(config, x0, noisy):
    phi = build_denoiser(build_meta(config, 'pfgmpp', 'edm')).eval()
    clean = x0.expand(512, 1, 16, 16)
    y = noisy.expand(512, 1, 16, 16)
    sigma = torch.ones(512, dtype=torch.float64)
    eta = perturb(clean, sigma, 128.0, seed=3) - clean

    with torch.no_grad():
        plus = drift_matching_loss(phi, clean, clean + eta, sigma, y)
        minus = drift_matching_loss(phi, clean, clean - eta, sigma, y)

    assert float(plus) == pytest.approx(float(minus), rel=0.05)


def central_differences(model, loss, eps=1e-6):
    numeric = []
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for k in range(flat.numel()):
                flat[k] += eps
                up = float(loss())
                flat[k] -= 2 * eps
                down = float(loss())
                flat[k] += eps
                numeric.append((up - down) / (2 * eps))
    return torch.tensor(numeric, dtype=torch.float64)


def test_gradient_matches_finite_differences(config, toy_arch, x0, noisy):
    torch.manual_seed(0)
    phi = build_denoiser(build_meta(config, 'pfgmpp', 'edm', toy_arch))
    phi = phi.double()
    clean = x0.double().expand(2, 1, 16, 16)
    y = noisy.double().expand(2, 1, 16, 16)

    def loss():
        return pfgmpp_loss(phi, clean, y, 128.0, seed=4, sigma=0.7)

    loss().backward()
    grad = torch.cat([p.grad.flatten() for p in phi.parameters()])
    numeric = central_differences(phi, loss)

    assert grad.numel() == 10
    assert float((grad - numeric).norm() / grad.norm()) < 1e-3


@pytest.mark.parametrize('metric', ['l2', 'pseudo_huber'])
def test_consistency_gradient_matches_finite_differences(
    config, toy_arch, x0, noisy, metric
):
    torch.manual_seed(0)
    meta = build_meta(config, 'pfcm', 'consistency', toy_arch)
    theta = build_denoiser(meta).double()
    theta_minus = copy.deepcopy(theta)
    with torch.no_grad():
        for p in theta_minus.parameters():
            p.mul_(0.9)
    clean = x0.double().expand(2, 1, 16, 16)
    y = noisy.double().expand(2, 1, 16, 16)
    x_next = perturb(clean, 2.0, 128.0, seed=1)
    x_hat = perturb(clean, 1.5, 128.0, seed=2)
    sigma_next = torch.full((2,), 2.0, dtype=torch.float64)
    sigma_cur = torch.full((2,), 1.5, dtype=torch.float64)

    def loss():
        return consistency_loss(
            theta, theta_minus, x_next, sigma_next, x_hat, sigma_cur, y,
            get_metric(metric),
        )

    loss().backward()
    grad = torch.cat([p.grad.flatten() for p in theta.parameters()])
    numeric = central_differences(theta, loss)

    assert grad.numel() == 10
    assert float((grad - numeric).norm() / grad.norm()) < 1e-3


def test_pretrain_without_iterations_returns_the_initialization(
    samples, config, settings
):
    config = config.model_copy(update={'iters': 0})

    phi, trace = pretrain(samples, config, settings=settings)
    again, _ = pretrain(samples, config, settings=settings)

    assert trace == []
    assert phi.meta.stage == 'pfgmpp'
    assert phi.meta.preconditioning == 'edm'
    assert state_digest(phi) == state_digest(again)


def test_pretrain_is_deterministic(samples, config, settings):
    _, first = pretrain(samples, config, settings=settings)
    _, second = pretrain(samples, config, settings=settings)

    assert [r.loss for r in first] == [r.loss for r in second]
    assert [r.iteration for r in first] == [1, 2, 3]


def test_pretrain_resume_replays_the_run(tmp_path, samples, config, settings):
    phi, trace = pretrain(samples, config, tmp_path, settings=settings)
    resumed, resumed_trace = pretrain(
        samples,
        config,
        resume=checkpoint_path(tmp_path, 'pfgmpp', 2),
        settings=settings,
    )

    assert [r.loss for r in resumed_trace] == [r.loss for r in trace]
    assert state_digest(resumed) == state_digest(phi)


def test_loss_trace_round_trip(tmp_path):
    records = [
        LossRecord(iteration=1, loss=0.5, lr=1e-4, wallclock=0.1),
        LossRecord(
            iteration=2, loss=0.25, lr=1e-4, wallclock=0.2, consistency_gap=3.0
        ),
    ]

    path = write_loss_trace(tmp_path / 'loss.csv', records)

    assert read_loss_trace(path) == records


def test_ema_update_boundaries(student):
    target = copy.deepcopy(student)
    with torch.no_grad():
        for p in target.parameters():
            p.mul_(2)
    frozen = params(target)

    ema_update(target, student, 1.0)
    assert torch.equal(params(target), frozen)

    ema_update(target, student, 0.0)
    assert torch.equal(params(target), params(student))


def test_ema_update_rejects_bad_decay(student):
    with pytest.raises(ValueError, match='outside'):
        ema_update(student, student, 1.5)


def test_degenerate_step_has_zero_loss(student, point_batch):
    clean, noisy = point_batch
    x = perturb(clean, 1.0, 128.0, seed=0)
    sigma = torch.ones(2, dtype=torch.float64)
    theta_minus = copy.deepcopy(student)

    loss = consistency_loss(
        student, theta_minus, x, sigma, x, sigma, noisy, get_metric('l2')
    )

    assert float(loss) == 0.0


def test_target_branch_carries_no_gradient(student, point_batch):
    clean, noisy = point_batch
    theta_minus = copy.deepcopy(student)
    x_next = perturb(clean, 2.0, 128.0, seed=1)
    x_hat = perturb(clean, 1.0, 128.0, seed=2)
    sigma_next = torch.full((2,), 2.0, dtype=torch.float64)
    sigma_cur = torch.ones(2, dtype=torch.float64)
    metric = get_metric('l2')

    consistency_loss(
        student, theta_minus, x_next, sigma_next, x_hat, sigma_cur, noisy,
        metric,
    ).backward()
    grad = [p.grad.clone() for p in student.parameters()]
    student.zero_grad()

    target = f_apply(theta_minus, x_hat, sigma_cur, noisy).detach()
    online = f_apply(student, x_next, sigma_next, noisy)
    metric(online, target).mean().backward()

    assert all(p.grad is None for p in theta_minus.parameters())
    for a, p in zip(grad, student.parameters()):
        torch.testing.assert_close(a, p.grad)


@pytest.mark.parametrize('i', [0, 8])
def test_distill_step_index_range(
    student, phi_point, point_batch, distill_config, i
):
    optimizer = make_optimizer(student.parameters(), 'adam', 1e-3)

    with pytest.raises(ValueError, match='i must lie'):
        distill_step(
            student, copy.deepcopy(student), phi_point, *point_batch, i,
            distill_config, 0, optimizer,
        )


@pytest.mark.parametrize('mu', [0.0, 1.0])
def test_distill_step_ema(student, phi_point, point_batch, distill_config, mu):
    theta_minus = copy.deepcopy(student)
    before = params(theta_minus)
    optimizer = make_optimizer(student.parameters(), 'adam', 1e-3)
    config = distill_config.model_copy(update={'mu': mu})

    for step in range(3):
        distill_step(
            student, theta_minus, phi_point, *point_batch, [3, 5], config,
            step, optimizer,
        )
        expected = params(student) if mu == 0 else before
        assert torch.equal(params(theta_minus), expected)


def test_ema_distance_contracts(
    student, phi_point, point_batch, distill_config
):
    theta_minus = copy.deepcopy(student)
    optimizer = make_optimizer(student.parameters(), 'adam', 1e-2)
    previous_theta = params(student)
    previous_gap = 0.0

    for step in range(5):
        distill_step(
            student, theta_minus, phi_point, *point_batch, 4,
            distill_config, step, optimizer,
        )
        current = params(student)
        gap = float((params(theta_minus) - current).norm())
        moved = float((current - previous_theta).norm())
        assert gap <= previous_gap + moved + 1e-6
        previous_theta, previous_gap = current, gap


def test_distill_step_non_finite_loss(student, config, distill_config):
    meta = build_meta(config, 'pfgmpp', 'edm')
    broken = IdealPointDenoiser(torch.full((16, 16), math.nan), meta)
    clean = torch.zeros(2, 1, 16, 16)
    optimizer = make_optimizer(student.parameters(), 'adam', 1e-3)

    with pytest.raises(NumericalError):
        distill_step(
            student, copy.deepcopy(student), broken, clean, clean, 2,
            distill_config, 0, optimizer,
        )


def test_distill_keeps_the_last_good_checkpoint(
    tmp_path, samples, config, distill_config, settings
):
    meta = build_meta(config, 'pfgmpp', 'edm')
    broken = IdealPointDenoiser(torch.full((16, 16), math.nan), meta)

    with pytest.raises(NumericalError, match='last good checkpoint'):
        distill(broken, samples, distill_config, tmp_path, settings=settings)

    assert checkpoint_path(tmp_path, 'pfcm', 0).exists()


def test_distill_requires_pretrained_field(
    theta_point, samples, distill_config, settings
):
    with pytest.raises(MetadataMismatchError, match='expected a pfgmpp'):
        distill(theta_point, samples, distill_config, settings=settings)


def test_distill_rejects_mismatched_config(
    phi_point, samples, distill_config, settings
):
    run = distill_config.run.model_copy(update={'d': 2048.0})
    config = distill_config.model_copy(update={'run': run})

    with pytest.raises(MetadataMismatchError, match='differs in D'):
        distill(phi_point, samples, config, settings=settings)


def test_distill_is_deterministic_and_leaves_phi_alone(
    samples, config, distill_config, settings
):
    phi, _ = pretrain(samples, config, settings=settings)
    before = state_digest(phi)

    theta, first = distill(phi, samples, distill_config, settings=settings)
    _, second = distill(phi, samples, distill_config, settings=settings)

    assert state_digest(phi) == before
    assert theta.meta.stage == 'pfcm'
    assert theta.meta.preconditioning == 'consistency'
    assert [r.loss for r in first] == [r.loss for r in second]


def test_student_starts_from_the_field_weights(samples, config, settings):
    phi, _ = pretrain(samples, config, settings=settings)

    theta = init_student(phi, DistillConfig(run=config))

    assert state_digest(phi) != state_digest(theta)
    assert torch.equal(params(theta), params(phi))
    assert theta.meta.arch.dropout == 0.0


def test_ideal_consistency_model_has_no_gap(theta_point, phi_point, noisy):
    assert consistency_gap(theta_point, phi_point, [noisy], seed=0) == 0.0


def test_gap_is_recorded_in_the_trace(
    phi_point, samples, distill_config, settings
):
    config = distill_config.model_copy(update={'gap_every': 2})

    _, trace = distill(phi_point, samples, config, settings=settings)

    assert [r.consistency_gap is not None for r in trace] == [
        False, True, False,
    ]


def test_distillation_has_its_own_learning_rate(
    phi_point, samples, distill_config, settings
):
    _, trace = distill(phi_point, samples, distill_config, settings=settings)
    _, faster = distill(
        phi_point, samples, distill_config.model_copy(update={'lr': 5e-4}),
        settings=settings,
    )

    assert distill_config.run.lr == 1e-3
    assert [r.lr for r in trace] == [1e-5] * 3
    assert [r.lr for r in faster] == [5e-4] * 3


@pytest.mark.slow
def test_pretrain_converges_on_one_sample(x0, noisy, config, settings):
    config = config.model_copy(
        update={'iters': 2000, 'width': 16, 'dropout': 0.0, 'batch': 4}
    )

    _, trace = pretrain([PairedSample(x0, noisy)], config, settings=settings)

    start = sum(r.loss for r in trace[:50]) / 50
    end = sum(r.loss for r in trace[-50:]) / 50
    assert end < 0.1 * start


@pytest.mark.slow
def test_distilled_point_model_recovers_the_point(x0, noisy, config, settings):
    run = config.model_copy(
        update={'iters': 3000, 'width': 16, 'sigma_max': 380.0, 'batch': 4}
    )
    meta = build_meta(run, 'pfgmpp', 'edm')
    phi = IdealPointDenoiser(x0, meta)
    distill_config = DistillConfig(run=run, mu=0.0, metric='l2', lr=1e-3)
    sample = PairedSample(x0, noisy)

    theta, _ = distill(phi, [sample], distill_config, settings=settings)
    initial = init_student(phi, distill_config)
    gap_before = consistency_gap(initial, phi, [noisy], seed=1)
    gap_after = consistency_gap(theta, phi, [noisy], seed=1)

    out = pfcm_sample(theta, noisy, seed=2).output
    assert float((out - x0).norm() / x0.norm()) < 0.02
    assert gap_after * 5 <= gap_before
