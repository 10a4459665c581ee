import numpy as np
import pytest

from chromaphase import PhaseMap
from chromaphase.dataset import simulate_sample
from chromaphase.diffusion import DiffusionModel, losses, sampling, schedule
from chromaphase.diffusion.schedule import LearnedSchedule
from chromaphase.diffusion.training import (
    TrainConfig,
    TrainingSet,
    read_checkpoint,
    train,
    write_checkpoint,
)
from chromaphase.predictor import (
    Network,
    Optimizer,
    OptimizerConfig,
    affine_predictor,
    mean_predictor_spec,
    residual_predictor,
    vector_predictor,
)
from chromaphase.util import NotADatasetError, ScheduleError, TrainingError, rng_stream


def curved_schedule(cond_channels=0):
    sched = LearnedSchedule(degree=3, cond_channels=cond_channels)
    state = sched.state()
    state["schedule.c0"] = np.array([0.5, 1.0, -0.7, 0.3])
    sched.load_state(state)
    return sched


def test_exponential_schedule_values():
    values = schedule.exponential(3.0).evaluate(np.array([0.0, 0.5, 1.0]))
    assert np.allclose(values.gamma.data, np.exp([0.0, -1.5, -3.0]))
    assert np.allclose(values.dgamma.data, -3.0 * values.gamma.data)
    assert np.allclose(values.beta.data, 3.0)


def test_batch_times_checks():
    assert schedule.batch_times(0.5, np.zeros((3, 2))).shape == (3,)
    with pytest.raises(ScheduleError):
        schedule.batch_times(np.array([0.5, 1.5]))
    with pytest.raises(ScheduleError):
        schedule.batch_times(np.zeros((2, 2)))
    with pytest.raises(ScheduleError):
        schedule.batch_times(np.zeros(2), np.zeros((3, 1)))


def test_learned_schedule_starts_at_constant_rate():
    sched = LearnedSchedule(initial_rate=6.0)
    t = np.linspace(0, 1, 11)
    values = sched.evaluate(t)
    assert np.allclose(values.beta.data, 6.0)
    assert np.allclose(values.gamma.data, np.exp(-6.0 * t))
    assert np.allclose(losses.ode_residual(sched, None, t).data, 0.0, atol=1e-20)


def test_learned_schedule_is_monotone():
    sched = curved_schedule()
    gamma = sched.gamma(np.linspace(0, 1, 101)).data
    assert gamma[0] == 1.0
    assert np.all(np.diff(gamma) < 0)
    assert np.all((gamma > 0) & (gamma <= 1))


def test_learned_schedule_derivatives():
    sched = curved_schedule()
    t = np.array([0.1, 0.4, 0.7, 0.9])
    h = 1e-5
    values = sched.evaluate(t)
    up = sched.evaluate(t + h)
    down = sched.evaluate(t - h)
    dgamma = (up.gamma.data - down.gamma.data) / (2 * h)
    d2gamma = (up.dgamma.data - down.dgamma.data) / (2 * h)
    assert np.allclose(values.dgamma.data, dgamma, rtol=1e-6, atol=1e-9)
    assert np.allclose(values.d2gamma.data, d2gamma, rtol=1e-5, atol=1e-7)


def test_conditioned_schedule():
    sched = curved_schedule(cond_channels=2)
    X = np.random.default_rng(0).standard_normal((3, 2, 4, 4))
    t = np.full(3, 0.5)
    # Zero conditioning weights leave the schedule unconditioned.
    assert np.allclose(sched.gamma(t, X).data, curved_schedule().gamma(t).data)
    sched.gamma(t, X).sum().backward()
    assert sched.parameters()[1].grad.shape == (2, 4)
    with pytest.raises(ScheduleError):
        sched.gamma(t, np.zeros((3, 1, 4, 4)))


def test_schedule_state_checks():
    sched = LearnedSchedule(degree=3)
    with pytest.raises(ScheduleError):
        sched.load_state({"schedule.c0": np.zeros(3)})
    with pytest.raises(ScheduleError):
        sched.load_state({})
    with pytest.raises(ScheduleError):
        LearnedSchedule(degree=-1)
    assert LearnedSchedule(degree=3).parameters()[0].shape == (4,)
    assert LearnedSchedule(degree=0).gamma(1.0).data[0] == pytest.approx(np.exp(-6.0))


def test_forward_sample_checks():
    y0 = np.ones((2, 1, 4, 4))
    eps = np.zeros_like(y0)
    out = losses.forward_sample(y0, np.array([0.0, 1.0]), eps, schedule.quadratic())
    assert np.allclose(out.data[0], 0.0)
    assert np.allclose(out.data[1], 1.0)
    with pytest.raises(ScheduleError):
        losses.forward_sample(y0, 0.5, eps, schedule.constant(1.5))
    with pytest.raises(ScheduleError):
        losses.forward_sample(y0, 0.5, np.zeros((2, 1, 4, 3)), schedule.linear())


def test_loss_prior():
    y0 = np.zeros((2, 3))
    sched = schedule.exponential(4.0)
    g = np.exp(-4.0)
    expected = 0.5 * 3 * (-np.log(1 - g) - g)
    assert np.isclose(losses.loss_prior(y0, None, sched).data, expected)
    with pytest.raises(ScheduleError):
        losses.loss_prior(y0, None, schedule.constant(1.0))


def test_loss_beta_vanishes_only_at_boundaries():
    t = np.array([0.2, 0.6])
    value = losses.loss_beta(schedule.exponential(5.0), None, t=t).data
    assert np.isclose(value, np.exp(-10.0))
    # gamma = 1 - t has beta gamma = 1 = -dgamma.
    assert np.isclose(losses.loss_beta(schedule.linear(), None, t=t).data, 0.0)


def test_loss_noise_with_oracle_is_zero():
    sched = schedule.exponential(4.0)

    def oracle(y_t, t, X):
        return y_t.data / np.sqrt(1 - sched.gamma(t).data)[:, None, None, None]

    y0 = np.zeros((3, 1, 4, 4))
    value = losses.loss_noise(y0, None, sched, oracle, rng=rng_stream(0, 0))
    assert np.isclose(value.data, 0.0, atol=1e-20)


def test_loss_mean():
    y = np.ones((2, 1, 2, 2))
    value = losses.loss_mean(y, np.zeros((2, 1, 2, 2)), lambda X: np.zeros_like(X))
    assert value.data == 4.0


def test_loss_gamma_of_linear_schedule():
    assert losses.loss_gamma(schedule.linear(), None, rng=rng_stream(0, 0), batch=4).data == 0.0


def small_model(mode="zmd", channels=1, seed=0):
    eps = Network(residual_predictor(2 + channels, 1, width=4, blocks=1, seed=seed))
    mean = Network(mean_predictor_spec(channels, 1, width=4, seed=seed)) if mode == "zmd" else None
    sched = LearnedSchedule(degree=3, cond_channels=channels)
    return DiffusionModel(eps, sched, mean, a=1e-3, omega=2.0, T=20, mode=mode)


def test_model_validation():
    with pytest.raises(ScheduleError):
        DiffusionModel(lambda *args: 0, schedule.linear(), mode="zmd")
    with pytest.raises(ScheduleError):
        DiffusionModel(lambda *args: 0, schedule.linear(), mode="cvdm", T=0)
    with pytest.raises(ScheduleError):
        DiffusionModel(lambda *args: 0, schedule.linear(), mode="ddim")


def test_model_state_round_trip():
    model = small_model()
    state = model.state()
    assert "eps.0.weight" in state
    assert "mean.0.weight" in state
    assert "schedule.c0" in state
    other = small_model(seed=1)
    other.load_state(state)
    assert all(np.array_equal(other.state()[name], state[name]) for name in state)
    count = sum(p.data.size for p in model.parameters())
    assert count == sum(value.size for value in state.values())


def make_data(count=16, seed=0):
    rng = rng_stream(seed, 0)
    X = rng.standard_normal((count, 1, 4, 4))
    y = 2 * X + 0.1 * rng.standard_normal((count, 1, 4, 4))
    return TrainingSet(y, X)


def test_zmd_loss_gradients_reach_all_parts():
    model = small_model()
    data = make_data()
    loss = losses.loss_zmd(data.batch(np.arange(4)), model, rng=rng_stream(0, 1))
    loss.backward()
    grads = [p.grad for p in model.parameters()]
    assert all(g is not None and np.all(np.isfinite(g)) for g in grads)
    # The diffusion terms must not move the mean predictor.
    model.zero_grad()
    model.omega = 0.0
    losses.loss_zmd(data.batch(np.arange(4)), model, rng=rng_stream(0, 1)).backward()
    assert all(p.grad is None or not np.any(p.grad) for p in model.mean_predictor.parameters())


def test_cvdm_mode_ignores_mean():
    model = small_model(mode="cvdm")
    data = make_data()
    value = losses.loss_zmd(data.batch(np.arange(4)), model, t=np.full(4, 0.5), eps=np.zeros((4, 1, 4, 4)))
    assert np.isfinite(value.data)


def test_discrete_schedule():
    tables = sampling.discrete_schedule(schedule.exponential(5.0), None, 20, batch=2)
    assert tables.betas.shape == (2, 20)
    assert np.allclose(tables.betas, 0.25)
    assert np.allclose(tables.gammas, tables.gammas_from_logs())
    assert np.allclose(tables.gammas[:, -1], 0.75 ** 20)
    with pytest.raises(ScheduleError):
        sampling.DiscreteSchedule(np.array([[0.5, 1.0]]))
    with pytest.raises(ScheduleError):
        sampling.discrete_schedule(schedule.linear(), None, 0)


def oracle_model(b=5.0, T=20, mean=None):
    sched = schedule.exponential(b)
    tables = sampling.discrete_schedule(sched, None, T)

    def eps_predictor(y_t, t, X):
        step = np.rint(t * T).astype(int)
        level = np.sqrt(1 - tables.gammas[0, step - 1])
        return y_t.data / level.reshape((-1,) + (1,) * (y_t.ndim - 1))

    mode = "cvdm" if mean is None else "zmd"
    return DiffusionModel(eps_predictor, sched, mean, T=T, mode=mode)


def test_oracle_sampling_recovers_point_mass():
    X = np.zeros((3, 1, 4, 4))
    out = sampling.cvdm_sample(X, oracle_model(), rng_stream(0, 0), (3, 1, 4, 4))
    assert np.allclose(out, 0.0, atol=1e-10)
    model = oracle_model(mean=lambda X: np.full(np.shape(X), 3.0))
    out = sampling.ancestral_sample(X, model, rng_stream(0, 0))
    assert np.allclose(out, 3.0, atol=1e-10)
    assert np.array_equal(sampling.mean_sample(X, model), np.full(X.shape, 3.0))


def test_sampling_is_deterministic():
    model = small_model()
    X = make_data().X[:3]
    a = sampling.ancestral_sample(X, model, rng_stream(5, 0))
    b = sampling.ancestral_sample(X, model, rng_stream(5, 0))
    c = sampling.ancestral_sample(X, model, rng_stream(5, 1))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sampling_warns_on_coarse_steps(capsys):
    sampling.cvdm_sample(None, oracle_model(b=15.0), rng_stream(0, 0), (2, 1, 4, 4))
    assert "coarse steps" in capsys.readouterr().err


def test_sampling_reports_non_finite_values():
    model = DiffusionModel(lambda y, t, X: np.full(y.shape, np.nan), schedule.exponential(5.0), mode="cvdm", T=10)
    with pytest.raises(TrainingError) as info:
        sampling.cvdm_sample(None, model, rng_stream(0, 0), (1, 1, 4, 4))
    assert info.value.step == 10
    with pytest.raises(ScheduleError):
        sampling.mean_sample(None, model)


def test_training_set_checks():
    with pytest.raises(TrainingError):
        TrainingSet(np.zeros((0, 1, 4, 4)))
    with pytest.raises(TrainingError):
        TrainingSet(np.zeros((2, 1, 4, 4)), np.zeros((3, 1, 4, 4)))
    with pytest.raises(TrainingError):
        TrainingSet.from_samples([])
    with pytest.raises(TrainingError):
        TrainConfig(batch_size=0)


def test_from_samples(quiet_spec, sinusoid_phase, rng):
    samples = [simulate_sample(PhaseMap(sinusoid_phase), quiet_spec, rng, index=idx) for idx in range(2)]
    data = TrainingSet.from_samples(samples)
    assert data.y.shape == (2, 1, 64, 64)
    assert data.X.shape == (2, 3, 64, 64)


def test_training_resumes_bitwise(tmp_path):
    config = TrainConfig(steps=6, batch_size=4, optimizer=OptimizerConfig(lr=1e-3), seed=3, checkpoint_every=3)
    data = make_data()
    _, full = train(data, small_model(), config, checkpoint_path=str(tmp_path / "full.zmdk"))
    assert len(full) == 6
    partial_path = str(tmp_path / "partial.zmdk")
    _, first = train(data, small_model(), config.with_steps(3), checkpoint_path=partial_path)
    checkpoint, extra = read_checkpoint(partial_path)
    assert checkpoint.step == 3
    assert extra == {}
    _, resumed = train(data, small_model(), config, resume=checkpoint)
    assert first == full[:3]
    assert resumed == full


def test_checkpoint_round_trip(tmp_path):
    path = str(tmp_path / "model.zmdk")
    model, _ = train(make_data(), small_model(), TrainConfig(steps=2, batch_size=2), checkpoint_path=path)
    checkpoint, _ = read_checkpoint(path)
    write_checkpoint(str(tmp_path / "copy.zmdk"), checkpoint, {"note": "copy"})
    again, extra = read_checkpoint(str(tmp_path / "copy.zmdk"))
    assert extra == {"note": "copy"}
    assert again.trace == checkpoint.trace
    assert all(np.array_equal(again.params[name], value) for name, value in model.state().items())
    with open(path, "r+b") as f:
        f.write(b"NOPE")
    with pytest.raises(NotADatasetError):
        read_checkpoint(path)


def test_training_stops_on_non_finite_loss():
    model = DiffusionModel(
        lambda y, t, X: np.full(y.shape, np.nan),
        LearnedSchedule(),
        lambda X: np.zeros_like(X),
        T=10,
    )
    with pytest.raises(TrainingError) as info:
        train(make_data(), model, TrainConfig(steps=3, batch_size=2))
    assert info.value.step == 0
    assert info.value.checkpoint.step == 0


def test_loss_noise_expectations():
    sched = schedule.exponential(4.0)
    y0 = np.zeros((10000, 8))
    blind = losses.loss_noise(y0, None, sched, lambda y_t, t, X: np.zeros(y_t.shape), rng=rng_stream(0, 2))
    assert blind.data == pytest.approx(4.0, rel=0.03)
    rng = rng_stream(0, 3)
    eps = rng.standard_normal(y0.shape)
    flipped = losses.loss_noise(y0, None, sched, lambda y_t, t, X: -eps, rng=rng, eps=eps)
    assert flipped.data == pytest.approx(4 * 4.0, rel=0.05)


def test_loss_gamma_of_exponential_schedule():
    value = losses.loss_gamma(schedule.exponential(1.0), None, rng=rng_stream(0, 4), batch=10000).data
    assert value == pytest.approx((1 - np.exp(-2.0)) / 2, rel=0.03)
    assert losses.loss_gamma(schedule.quadratic(), None, rng=rng_stream(0, 4), batch=8).data == 4.0


def test_forward_sample_variance():
    sched = schedule.exponential(2.0)
    y0 = np.broadcast_to(np.array([1.0, -0.5, 2.0, 0.0]), (10000, 4))
    eps = rng_stream(0, 5).standard_normal(y0.shape)
    y_t = losses.forward_sample(y0, 0.3, eps, sched).data
    gamma = np.exp(-0.6)
    assert np.allclose(y_t.var(axis=0), 1 - gamma, rtol=0.05)
    assert np.allclose(y_t.mean(axis=0), np.sqrt(gamma) * y0[0], atol=0.05)


def test_discrete_schedule_telescopes_to_continuous_rate():
    tables = sampling.discrete_schedule(schedule.exponential(2.0), None, 10000)
    assert np.allclose(tables.gammas, tables.gammas_from_logs(), rtol=1e-10)
    assert abs(tables.gammas[0, -1] - np.exp(-2.0)) < 1e-3


def gaussian_oracle(mean, std, T=1000, b=5.0, centered=True):
    """
    Model whose noise predictor is the exact E[eps | y_t] for targets
    distributed as N(mean, std^2).
    """
    sched = schedule.exponential(b)
    tables = sampling.discrete_schedule(sched, None, T)
    shift = 0.0 if centered else mean

    def eps_predictor(y_t, t, X):
        gamma = tables.gammas[0, np.rint(t * T).astype(int) - 1][:, None]
        spread = gamma * std ** 2 + 1 - gamma
        return np.sqrt(1 - gamma) * (y_t.data - np.sqrt(gamma) * shift) / spread

    if centered:
        return DiffusionModel(eps_predictor, sched, lambda X: np.full(np.shape(X), mean), T=T)
    return DiffusionModel(eps_predictor, sched, T=T, mode="cvdm")


def test_oracle_sampling_matches_gaussian_target():
    X = np.zeros((10000, 1))
    out = sampling.ancestral_sample(X, gaussian_oracle(2.0, 0.5), rng_stream(0, 6))
    assert abs(out.mean() - 2.0) < 0.05 * 2.0
    assert abs(out.std() - 0.5) < 0.15 * 0.5
    # the residual chain is symmetric, so its mean is zero up to sampling error
    assert abs(out.mean() - 2.0) < 3 * 0.5 / np.sqrt(out.size)
    out = sampling.cvdm_sample(X, gaussian_oracle(2.0, 0.5, centered=False), rng_stream(0, 7), X.shape)
    assert abs(out.mean() - 2.0) < 0.05 * 2.0
    assert abs(out.std() - 0.5) < 0.15 * 0.5


def randomized_model(seed=0):
    """
    Small model with every parameter drawn at random, so no gradient
    vanishes behind a zero-initialized layer.
    """
    model = small_model()
    rng = rng_stream(seed, 9)
    model.load_state({name: 0.3 * rng.standard_normal(value.shape) for name, value in model.state().items()})
    return model


def test_zmd_loss_matches_finite_differences():
    model = randomized_model()
    data = make_data(count=4)
    batch = data.batch(np.arange(4))
    t = np.array([0.1, 0.35, 0.6, 0.9])
    eps = rng_stream(0, 10).standard_normal((4, 1, 4, 4))

    def value():
        return float(losses.loss_zmd(batch, model, t=t, eps=eps).data)

    model.zero_grad()
    losses.loss_zmd(batch, model, t=t, eps=eps).backward()
    scale = max(1.0, abs(value()))
    mean_ids = {id(p) for p in model.mean_predictor.parameters()}
    rng = rng_stream(0, 11)
    h = 1e-5
    for p in model.parameters():
        if id(p) in mean_ids:
            continue
        base = p.data.copy()
        for index in rng.choice(base.size, size=min(5, base.size), replace=False):
            step = np.zeros(base.size)
            step[index] = h
            p.data = base + step.reshape(base.shape)
            up = value()
            p.data = base - step.reshape(base.shape)
            down = value()
            p.data = base
            numeric = (up - down) / (2 * h)
            analytic = p.grad.flat[index]
            assert abs(numeric - analytic) <= 1e-4 * max(abs(numeric), abs(analytic)) + 1e-8 * scale


def test_training_without_steps_changes_nothing():
    model = small_model()
    before = model.state()
    model, trace = train(make_data(), model, TrainConfig(steps=0, batch_size=4))
    assert trace == []
    after = model.state()
    assert all(np.array_equal(after[name], before[name]) for name in before)


def test_training_is_deterministic():
    config = TrainConfig(steps=4, batch_size=4, optimizer=OptimizerConfig(lr=1e-3), seed=8)
    first, first_trace = train(make_data(), small_model(), config)
    second, second_trace = train(make_data(), small_model(), config)
    assert first_trace == second_trace
    assert all(np.array_equal(value, second.state()[name]) for name, value in first.state().items())


@pytest.mark.slow
def test_zero_mean_diffusion_learns_the_mean():
    data = make_data(count=64)
    model = small_model()
    config = TrainConfig(steps=300, batch_size=16, optimizer=OptimizerConfig(lr=3e-3), seed=1)
    before = np.mean((sampling.mean_sample(data.X, model) - data.y) ** 2)
    model, trace = train(data, model, config)
    after = np.mean((sampling.mean_sample(data.X, model) - data.y) ** 2)
    assert after < 0.5 * before
    assert np.mean(trace[-30:]) < np.mean(trace[:30])
    samples = sampling.ancestral_sample(data.X[:8], model, rng_stream(1, 0))
    assert np.all(np.isfinite(samples))


@pytest.mark.slow
def test_schedule_training_meets_boundary_conditions():
    sched = LearnedSchedule(degree=3, initial_rate=2.0)
    optimizer = Optimizer(OptimizerConfig(lr=0.05))
    rng = rng_stream(0, 0)
    for _ in range(2000):
        sched.parameters()[0].zero_grad()
        loss = losses.loss_beta(sched, None, rng=rng, batch=32)
        loss = loss + 1e-3 * losses.loss_gamma(sched, None, rng=rng, batch=32)
        loss.backward()
        optimizer.apply(sched.parameters())
    t = np.linspace(0, 1, 101)
    assert sched.gamma(0.0).data[0] > 0.99
    assert sched.gamma(1.0).data[0] < 0.01
    assert losses.ode_residual(sched, None, t).data < 1e-3


def affine_task(count, seed, offset=0.0, dim=8):
    rng = rng_stream(seed, 0)
    A = np.eye(dim) + 0.3 * rng_stream(100, 0).standard_normal((dim, dim))
    b = np.linspace(-1, 1, dim) + offset
    X = rng.standard_normal((count, dim))
    y = X @ A.T + b + 0.1 * rng.standard_normal((count, dim))
    return X[:, :, None, None], y[:, :, None, None], A, b


def vector_model(mode, dim=8, seed=0):
    eps = Network(vector_predictor(2 * dim + 1, dim, seed=seed))
    mean = Network(affine_predictor(dim, dim, seed=seed)) if mode == "zmd" else None
    sched = LearnedSchedule(degree=3, cond_channels=dim)
    return DiffusionModel(eps, sched, mean, T=200, mode=mode)


@pytest.mark.slow
def test_zero_mean_diffusion_matches_conditional_distribution():
    X, y, A, b = affine_task(4000, seed=0)
    config = TrainConfig(steps=4000, batch_size=128, optimizer=OptimizerConfig(lr=2e-3), seed=0)
    model, _ = train(TrainingSet(y, X), vector_model("zmd"), config)
    x0 = rng_stream(1, 0).standard_normal(8)
    batch = np.broadcast_to(x0[None, :, None, None], (10000, 8, 1, 1))
    samples = sampling.ancestral_sample(batch, model, rng_stream(1, 1))[:, :, 0, 0]
    truth = A @ x0 + b
    assert np.all(np.abs(samples.mean(axis=0) - truth) < 0.05 * np.maximum(np.abs(truth), 1.0))
    assert np.all(np.abs(samples.std(axis=0) - 0.1) < 0.015)
    # The mean prediction alone has no spread.
    assert np.all(sampling.mean_sample(batch[:2], model).std(axis=0) == 0)


@pytest.mark.slow
def test_centering_beats_plain_diffusion_on_offset_targets():
    wins = 0
    for seed in range(5):
        X, y, A, b = affine_task(2000, seed=seed, offset=10.0)
        config = TrainConfig(steps=1000, batch_size=64, optimizer=OptimizerConfig(lr=2e-3), seed=seed)
        x0 = rng_stream(seed, 2).standard_normal(8)
        batch = np.broadcast_to(x0[None, :, None, None], (1000, 8, 1, 1))
        truth = A @ x0 + b
        errors = {}
        for mode in ("zmd", "cvdm"):
            model, _ = train(TrainingSet(y, X), vector_model(mode, seed=seed), config)
            rng = rng_stream(seed, 3)
            if mode == "zmd":
                samples = sampling.ancestral_sample(batch, model, rng)
            else:
                samples = sampling.cvdm_sample(batch, model, rng, batch.shape)
            errors[mode] = np.linalg.norm(samples[:, :, 0, 0].mean(axis=0) - truth)
        wins += errors["zmd"] < errors["cvdm"]
    assert wins >= 4
