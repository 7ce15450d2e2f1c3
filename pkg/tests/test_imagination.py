import time

import pytest
import torch

from mirage.agent import ActorCritic
from mirage.config import AgentConfig, WorldModelConfig
from mirage.imagination import imagine_frames, rollout, warmup
from mirage.numerics import RngStreams
from mirage.world_model import WorldModel


def build(seed=0, feature_dim=32, layers=1, batch=3, inference_context=24):
    cfg = WorldModelConfig(
        image_size=16, channels_base=8, categories=6, classes=6,
        feature_dim=feature_dim, layers=layers, heads=2, dropout=0.1,
        train_context=16, inference_context=inference_context,
    )
    model = WorldModel(cfg)
    agent = ActorCritic(cfg, AgentConfig(hidden_dim=32))
    streams = RngStreams(seed=seed)
    model.init_parameters(streams)
    agent.init_parameters(streams)
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    obs = torch.rand(batch, 4, 3, 16, 16, generator=gen)
    actions = torch.randint(0, cfg.action_count, (batch, 4), generator=gen)
    return cfg, model, agent, streams, obs, actions


class TestWarmup:
    def test_cache_length_equals_context(self):
        cfg, model, agent, streams, obs, actions = build()
        state, z, h, cache = warmup(model, agent, obs, actions, streams)
        assert cache.stored_len == obs.shape[1]
        assert state.shape == (3, agent.state_width)
        assert z.shape == (3, cfg.categories, cfg.classes)

    def test_warmup_hidden_matches_batched_forward(self):
        cfg, model, agent, streams, obs, actions = build()
        _, _, h, _ = warmup(model, agent, obs, actions, streams)
        # Recompute the context hidden state via the batched path using the
        # same posterior samples (same stream replay).
        replay = RngStreams(seed=streams.seed)
        b, c = obs.shape[:2]
        with torch.no_grad():
            post = model.encode(obs.reshape(b * c, 3, 16, 16)).view(b, c, cfg.categories, cfg.classes)
            z_ctx = model.sample_latent(post, replay.sampler)
            tokens = model.mixer(z_ctx, actions)
            h_ref = model.sequence(tokens)[:, -1]
        assert (h - h_ref).abs().max().item() < 1e-5

    def test_rejects_empty_context(self):
        cfg, model, agent, streams, obs, actions = build()
        with pytest.raises(ValueError):
            warmup(model, agent, obs[:, :0], actions[:, :0], streams)


class TestRollout:
    def test_lengths(self):
        cfg, model, agent, streams, obs, actions = build()
        start = warmup(model, agent, obs, actions, streams)
        out = rollout(model, agent, *start, horizon=16, streams=streams)
        assert out.states.shape == (3, 17, agent.state_width)
        assert out.actions.shape == (3, 16)
        assert out.rewards.shape == (3, 16)
        assert out.continuations.shape == (3, 16)
        assert out.log_probs.shape == (3, 16)
        assert torch.all((out.continuations > 0) & (out.continuations < 1))

    def test_deterministic_given_seed(self):
        outs = []
        for _ in range(2):
            cfg, model, agent, streams, obs, actions = build(seed=5)
            start = warmup(model, agent, obs, actions, streams)
            outs.append(rollout(model, agent, *start, horizon=8, streams=streams, greedy=True))
        assert torch.equal(outs[0].states, outs[1].states)
        assert torch.equal(outs[0].actions, outs[1].actions)
        assert torch.equal(outs[0].rewards, outs[1].rewards)

    def test_no_gradients_into_world_model(self):
        cfg, model, agent, streams, obs, actions = build()
        start = warmup(model, agent, obs, actions, streams)
        out = rollout(model, agent, *start, horizon=4, streams=streams)
        assert not out.states.requires_grad
        loss, _ = agent.actor_loss(out.states[:, :4], out.actions,
                                   torch.randn(3, 4), torch.randn(3, 4), scale=1.0)
        grads = torch.autograd.grad(loss, list(model.parameters()), allow_unused=True)
        assert all(g is None for g in grads)

    def test_decoder_not_on_imagination_path(self):
        cfg, model, agent, streams, obs, actions = build(seed=7)
        start = warmup(model, agent, obs, actions, streams)
        ref = rollout(model, agent, *start, horizon=8, streams=streams)

        cfg2, model2, agent2, streams2, obs2, actions2 = build(seed=7)
        model2.decoder = None  # nothing on the rollout path may touch it
        start2 = warmup(model2, agent2, obs2, actions2, streams2)
        out = rollout(model2, agent2, *start2, horizon=8, streams=streams2)
        assert torch.equal(ref.states, out.states)
        assert torch.equal(ref.rewards, out.rewards)

    def test_cache_overflow_protects_capacity(self):
        cfg, model, agent, streams, obs, actions = build(inference_context=6)
        start = warmup(model, agent, obs, actions, streams)
        from mirage.sequence import CacheOverflowError
        with pytest.raises(CacheOverflowError):
            rollout(model, agent, *start, horizon=8, streams=streams)


@pytest.mark.slow
def test_cached_rollout_scales_linearly():
    """KV-cached rollouts cost O(L) token computations; recomputing the
    prefix each step costs O(L^2).  Compare growth from L=16 to L=64."""
    cfg, model, agent, streams, obs, actions = build(
        feature_dim=256, layers=2, batch=24, inference_context=80)

    def timed_cached(horizon):
        start = warmup(model, agent, obs, actions, RngStreams(seed=0))
        t0 = time.perf_counter()
        rollout(model, agent, *start, horizon=horizon, streams=RngStreams(seed=1))
        return time.perf_counter() - t0

    @torch.no_grad()
    def timed_uncached(horizon):
        replay = RngStreams(seed=0)
        b, c = obs.shape[:2]
        post = model.encode(obs.reshape(b * c, 3, 16, 16)).view(b, c, cfg.categories, cfg.classes)
        z_ctx = model.sample_latent(post, replay.sampler)
        token_list = [model.mixer(z_ctx[:, t], actions[:, t]) for t in range(c)]
        sample_stream = RngStreams(seed=1)
        t0 = time.perf_counter()
        h = model.sequence(torch.stack(token_list, dim=1))[:, -1]
        z = model.sample_latent(model.predict_dynamics(h), sample_stream.sampler)
        state = agent.build_state(z, h)
        for _ in range(horizon):
            action = agent.act(state, sample_stream.policy)
            token_list.append(model.mixer(z, action))
            h = model.sequence(torch.stack(token_list, dim=1))[:, -1]  # full recompute
            z = model.sample_latent(model.predict_dynamics(h), sample_stream.sampler)
            state = agent.build_state(z, h)
        return time.perf_counter() - t0

    for fn in (timed_cached, timed_uncached):
        fn(4)  # warm caches and allocator
    cached_ratio = min(timed_cached(64) / timed_cached(16) for _ in range(3))
    uncached_ratio = min(timed_uncached(64) / timed_uncached(16) for _ in range(3))
    # Linear growth predicts ~4x, quadratic ~16x; leave generous slack.
    assert cached_ratio < 9.0, cached_ratio
    assert uncached_ratio > cached_ratio * 1.5, (cached_ratio, uncached_ratio)


class TestImagineFrames:
    def test_context_plus_predicted_frames(self):
        cfg, model, agent, streams, obs, actions = build(batch=1)
        long_actions = torch.randint(0, cfg.action_count, (1, 10))
        recon, imagined = imagine_frames(model, obs, long_actions, context=4, streams=streams)
        assert recon.shape == (1, 4, 3, 16, 16)
        assert imagined.shape == (1, 6, 3, 16, 16)
        assert float(recon.min()) >= 0.0 and float(recon.max()) <= 1.0

    def test_requires_actions_beyond_context(self):
        cfg, model, agent, streams, obs, actions = build(batch=1)
        with pytest.raises(ValueError):
            imagine_frames(model, obs, actions[:, :4], context=4, streams=streams)
