import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomagent.agent_loop import (
    EpisodeResult,
    LoopConfig,
    PolicyError,
    PolicyTurn,
    Termination,
    dumps_episode,
    group_seeds,
    parse_policy_output,
    replay_episode,
    run_episode,
    run_group,
    scripted_policy,
)
from anomagent.protocol import (
    Answer,
    TaskSpec,
    Thinking,
    ToolCall,
    ToolName,
    ToolReturn,
    Trajectory,
    check_format,
    serialize_trajectory,
)
from anomagent.tools import BackendConfig, BackendUnavailable, SimScript, SimulatedBackend

PG, IG, QE, KR, MG = ToolName.PG, ToolName.IG, ToolName.QE, ToolName.KR, ToolName.MG
TASK = TaskSpec("bottle", "crack", "bottle_normal.png")


def sim(scores, seed=0, jitter=0):
    return BackendConfig.simulated(seed, SimScript.from_dict({"qe_score_sequence": scores, "qe_jitter": jitter}))


def episode(scores, cfg=LoopConfig(), seed=0):
    return run_episode(TASK, scripted_policy, sim(scores, seed), cfg)


def test_single_pass_episode():
    e = episode([0.9])
    assert e.action_sequence == [PG, IG, QE, MG]
    assert e.terminated_by is Termination.ANSWER
    assert e.final_score == 0.9 and e.qe_scores == [0.9]
    assert check_format(e.trajectory)
    assert e.trajectory.answer.status == "success"


def test_low_score_retrieves_knowledge():
    e = episode([0.3, 0.9])
    assert e.action_sequence == [PG, IG, QE, KR, IG, QE, MG]
    assert e.qe_scores == [0.3, 0.9]


def test_score_between_trigger_and_threshold_skips_knowledge():
    assert episode([0.6, 0.9]).action_sequence == [PG, IG, QE, IG, QE, MG]


def test_generation_budget_forces_mask():
    e = episode([0.2, 0.3, 0.4])
    assert e.action_sequence == [PG, IG, QE, KR, IG, QE, KR, IG, QE, MG]
    assert e.trajectory.answer.status == "budget_exhausted"
    assert e.trajectory.answer.final_image_index == 4
    e = episode([0.2], LoopConfig(max_generations=1))
    assert e.action_sequence == [PG, IG, QE, MG]


def _never_answers(transcript, cfg):
    return PolicyTurn("look again", ToolCall(KR, {"item_name": "bottle", "anomaly_type": "crack"}))


def test_turn_budget():
    e = run_episode(TASK, _never_answers, sim([0.5]), LoopConfig(t_max=3))
    assert e.terminated_by is Termination.TURN_BUDGET
    assert e.action_sequence == [KR, KR, KR]
    assert e.turns == 3
    assert e.final_score == 0.0 and e.qe_scores == []


def test_scripted_policy_after_prompt_gen():
    t = Trajectory.start(TASK)
    t.segments += [
        Thinking("t"),
        ToolCall(PG, {"image": 1, "item_name": "bottle", "anomaly_type": "crack"}),
        ToolReturn(PG, {"prompt": "p"}),
    ]
    turn = scripted_policy(t, LoopConfig())
    assert turn.action == ToolCall(IG, {"prompt": "p", "target_image": 1})


def _until(scores, tool):
    e = episode(scores)
    t = e.trajectory.copy()
    cut = max(i for i, s in enumerate(t.segments) if isinstance(s, ToolReturn) and s.tool is tool)
    t.segments = t.segments[: cut + 1]
    return t


def test_scripted_policy_accepts_high_score():
    turn = scripted_policy(_until([0.95], QE), LoopConfig(theta=0.8))
    assert turn.action == ToolCall(MG, {"anomaly_image": 2})


def test_scripted_policy_answers_after_mask():
    turn = scripted_policy(_until([0.95], MG), LoopConfig())
    assert isinstance(turn.action, Answer)
    assert turn.action.status == "success" and turn.action.mask_generated


def test_refined_prompt_carries_review_and_knowledge():
    e = episode([0.3, 0.9])
    igs = [s for s in e.trajectory.tool_calls if s.name is IG]
    review = e.trajectory.tool_returns[2].content["review"]
    knowledge = e.trajectory.tool_returns[3].content["knowledge"]
    assert igs[1].arguments["prompt"].startswith(igs[0].arguments["prompt"])
    assert review in igs[1].arguments["prompt"] and knowledge in igs[1].arguments["prompt"]


def test_scripted_policy_rejects_dangling_transcript():
    t = Trajectory.start(TASK)
    t.segments.append(Thinking("x"))
    with pytest.raises(PolicyError):
        scripted_policy(t, LoopConfig())


def test_group_of_eight():
    results = run_group(TASK, scripted_policy, sim([0.6, 0.9]), LoopConfig(), 8)
    assert len(results) == 8
    assert all(r.terminated_by is Termination.ANSWER for r in results)


def test_identical_pair_without_seed_split():
    a, b = run_group(TASK, scripted_policy, sim([0.3, 0.9]), LoopConfig(), 2, split_seeds=False)
    assert a.to_dict() == b.to_dict()


def test_seeded_group_gives_distinct_traces():
    results = run_group(TASK, scripted_policy, sim([0.3, 0.6, 0.9], jitter=1), LoopConfig(), 4, seeds=[1, 2, 3, 4])
    assert len({tuple(r.qe_scores) for r in results}) == 4


def test_group_seeds_xor():
    assert group_seeds(6, 4) == [6, 7, 4, 5]


def test_parallel_group_keeps_order():
    backend = sim([0.3, 0.6, 0.9], seed=11, jitter=1)
    serial = run_group(TASK, scripted_policy, backend, LoopConfig(), 6)
    threaded = run_group(TASK, scripted_policy, backend, LoopConfig(), 6, jobs=4)
    assert [r.to_dict() for r in serial] == [r.to_dict() for r in threaded]


def test_group_errors():
    with pytest.raises(ValueError):
        run_group(TASK, scripted_policy, sim([0.9]), LoopConfig(), 0)
    with pytest.raises(ValueError):
        run_group(TASK, scripted_policy, sim([0.9]), LoopConfig(), 2, seeds=[1])


def test_policy_exception_keeps_partial_trajectory():
    def flaky(transcript, cfg):
        if transcript.tool_calls:
            raise RuntimeError("model crashed")
        return scripted_policy(transcript, cfg)

    e = run_episode(TASK, flaky, sim([0.9]), LoopConfig())
    assert e.terminated_by is Termination.ERROR
    assert e.action_sequence == [PG]
    assert "model crashed" in e.error


def test_garbage_policy_output():
    e = run_episode(TASK, lambda t, c: "<thinking>unterminated", sim([0.9]), LoopConfig())
    assert e.terminated_by is Termination.ERROR
    assert e.error.startswith("PolicyError") and e.trajectory.segments == []


def test_parse_policy_output():
    turn = parse_policy_output('<thinking>x</thinking><tool_call>{"name":"mask_gen","arguments":{"anomaly_image":1}}</tool_call>')
    assert turn == PolicyTurn("x", ToolCall(MG, {"anomaly_image": 1}))
    with pytest.raises(PolicyError):
        parse_policy_output('<tool_call>{"name":"mask_gen","arguments":{"anomaly_image":1}}</tool_call>')
    with pytest.raises(TypeError):
        PolicyTurn("x", Thinking("y"))


class _Broken(SimulatedBackend):
    def invoke(self, tool, args, ctx):
        if tool is QE:
            raise BackendUnavailable("judge offline")
        return super().invoke(tool, args, ctx)


def test_backend_failure_ends_episode():
    e = run_episode(TASK, scripted_policy, _Broken(0), LoopConfig())
    assert e.terminated_by is Termination.ERROR
    assert e.action_sequence == [PG, IG, QE]
    assert isinstance(e.trajectory.segments[-1], ToolCall)
    assert "judge offline" in e.error


def test_invalid_call_is_an_error_not_a_skip():
    def bad(transcript, cfg):
        return PolicyTurn("mask a missing image", ToolCall(MG, {"anomaly_image": 9}))

    e = run_episode(TASK, bad, sim([0.9]), LoopConfig())
    assert e.terminated_by is Termination.ERROR and e.action_sequence == [MG]


_scores = st.lists(st.sampled_from([0.1, 0.3, 0.5, 0.6, 0.75, 0.8, 0.95, 1.0]), min_size=1, max_size=4)


@settings(max_examples=60)
@given(_scores, st.integers(0, 2**32))
def test_replay_reproduces_the_episode(scores, seed):
    e = episode(scores, seed=seed)
    assert replay_episode(e.trajectory).to_dict() == e.to_dict()
    assert replay_episode(e.trajectory, sim(scores, seed)).to_dict() == e.to_dict()


@settings(max_examples=60)
@given(_scores)
def test_qe_scores_are_a_script_prefix(scores):
    e = episode(scores)
    padded = scores + [scores[-1]] * 4
    assert e.qe_scores == padded[: len(e.qe_scores)]
    assert e.final_score == e.qe_scores[-1]
    assert len(e.qe_scores) == e.action_sequence.count(QE)


def test_episode_dict_round_trip():
    e = episode([0.3, 0.9])
    row = json.loads(dumps_episode(e, task_id="x"))
    assert row["task_id"] == "x"
    assert EpisodeResult.from_dict(row).to_dict() == e.to_dict()
    assert EpisodeResult.from_dict(json.loads(json.dumps(e.to_dict()))).trajectory == e.trajectory


def test_serialized_episode_is_parseable():
    e = episode([0.6, 0.7, 0.9])
    assert serialize_trajectory(e.trajectory).endswith("</answer>")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"theta": 1.2},
        {"kr_trigger": 0.9, "theta": 0.8},
        {"kr_trigger": -0.1},
        {"max_generations": 0},
        {"t_max": 0},
    ],
)
def test_loop_config_rejects(kwargs):
    with pytest.raises(ValueError):
        LoopConfig(**kwargs)
