import numpy as np
import pytest

from twinmdp.abstraction import (
    SchemeSpec,
    TopologyFeaturizer,
    abstract,
    augment_with_hmm,
    build_vocabulary,
    hmm_observations,
    load_abstract_corpus,
    save_abstract_corpus,
    vocab_state_vector,
)
from twinmdp.errors import (
    EntityNotInGraph,
    EntityNotInVocabulary,
    SchemeMismatch,
)
from twinmdp.hmm import Hmm, viterbi_decode
from twinmdp.topology import make_graph
from twinmdp.trajectories import Entity, JudgeScores, RawStep, RawTrajectory


def chain_graph(n=5):
    nodes = [Entity(name=f"n{i}", etype="Pod") for i in range(n)]
    return nodes, make_graph(nodes, list(zip(nodes[:-1], nodes[1:])))


def chain_trajectory(nodes):
    """Scripted 3-turn walk back from the symptom (n4) toward the root."""
    n0, n1, n2, n3, n4 = nodes
    steps = (
        RawStep(
            turn_index=0, chosen_entity=n4, candidate_entities=(n4,),
            assessments={n4: "cascading"},
        ),
        RawStep(
            turn_index=1, chosen_entity=n3, candidate_entities=(n3,),
            assessments={n4: "cascading", n3: "cascading"},
        ),
        RawStep(
            turn_index=2, chosen_entity=n2, candidate_entities=(n2, n0),
            assessments={n4: "cascading", n3: "cascading", n2: "primary"},
        ),
    )
    return RawTrajectory(
        trajectory_id="walk", scenario_id="scn", symptom_entity=n4,
        steps=steps, scores=JudgeScores(fpc_accuracy=75.0, rce_identification=0.0),
    )


class TestNameSchemes:
    def test_assessment_codes(self):
        # 2 = primary, 1 = cascading, 0 = normal or unassessed
        a, b, c = (Entity(name=x, etype="Pod") for x in "abc")
        state = vocab_state_vector(("a", "b", "c"), "name",
                                   {a: "primary", b: "cascading"})
        assert state.tolist() == [2.0, 1.0, 0.0]

    def test_state_reflects_previous_turn(self):
        a, b = Entity(name="a", etype="Pod"), Entity(name="b", etype="Pod")
        steps = (
            RawStep(turn_index=0, chosen_entity=a, candidate_entities=(a, b),
                    assessments={a: "primary"}),
            RawStep(turn_index=1, chosen_entity=b, candidate_entities=(a, b),
                    assessments={a: "primary", b: "normal"}),
        )
        traj = RawTrajectory(trajectory_id="t", scenario_id="s",
                             symptom_entity=a, steps=steps,
                             scores=JudgeScores(0.0, 0.0))
        spec = SchemeSpec(kind="name", vocabulary=("a", "b"))
        out = abstract(traj, spec)
        assert out.steps[0].state.tolist() == [0.0, 0.0]  # nothing known yet
        assert out.steps[1].state.tolist() == [2.0, 0.0]
        assert out.steps[0].action == 0
        assert out.steps[1].action == 1
        assert out.steps[1].candidates == [0, 1]

    def test_nametype_distinguishes_types(self):
        pod = Entity(name="x", etype="Pod")
        svc = Entity(name="x", etype="Service")
        steps = (
            RawStep(turn_index=0, chosen_entity=pod, candidate_entities=(pod, svc),
                    assessments={pod: "primary"}),
            RawStep(turn_index=1, chosen_entity=svc, candidate_entities=(pod, svc),
                    assessments={pod: "primary", svc: "cascading"}),
        )
        traj = RawTrajectory(trajectory_id="t", scenario_id="s", symptom_entity=pod,
                             steps=steps, scores=JudgeScores(0.0, 0.0))
        vocab = build_vocabulary([traj], "nametype")
        assert vocab == (("x", "Pod"), ("x", "Service"))
        out = abstract(traj, SchemeSpec(kind="nametype", vocabulary=vocab))
        assert out.steps[1].state.tolist() == [2.0, 0.0]
        # the name scheme collapses both under one entry
        name_vocab = build_vocabulary([traj], "name")
        assert name_vocab == ("x",)

    def test_unknown_entity_rejected(self):
        a = Entity(name="a", etype="Pod")
        steps = (RawStep(turn_index=0, chosen_entity=a, candidate_entities=(a,)),)
        traj = RawTrajectory(trajectory_id="t", scenario_id="s", symptom_entity=a,
                             steps=steps, scores=JudgeScores(0.0, 0.0))
        with pytest.raises(EntityNotInVocabulary):
            abstract(traj, SchemeSpec(kind="name", vocabulary=("b",)))


class TestTopologyScheme:
    def test_scripted_walk_matches_hand_computed_features(self):
        # chain n0 -> n1 -> n2 -> n3 -> n4, diameter 4, sentinel 5
        nodes, graph = chain_graph()
        traj = chain_trajectory(nodes)
        out = abstract(traj, SchemeSpec(kind="topology", graph=graph))

        # turn 0: nothing assessed, no previous entity
        assert out.steps[0].state.tolist() == [5.0, 5.0]
        assert np.asarray(out.steps[0].action).tolist() == [5.0, 0.0, 5.0, 5.0]
        # turn 1: symptom flagged cascading on the previous turn
        assert out.steps[1].state.tolist() == [5.0, 0.0]
        assert np.asarray(out.steps[1].action).tolist() == [1.0, 1.0, 5.0, 1.0]
        # turn 2: n4 and n3 cascading; candidates n2 (near) and n0 (far)
        assert out.steps[2].state.tolist() == [5.0, 0.0]
        assert np.asarray(out.steps[2].action).tolist() == [1.0, 2.0, 5.0, 1.0]
        assert np.asarray(out.steps[2].candidates[1]).tolist() == [3.0, 4.0, 5.0, 3.0]

    def test_turn_zero_unlabeled_gives_sentinels_except_symptom_distance(self):
        nodes, graph = chain_graph()
        traj = chain_trajectory(nodes)
        out = abstract(traj, SchemeSpec(kind="topology", graph=graph))
        feats = np.asarray(out.steps[0].action)
        assert feats[1] == 0.0  # the chosen entity IS the symptom here
        assert feats[0] == feats[2] == feats[3] == 5.0

    def test_hub_feature_appended(self):
        nodes, graph = chain_graph()
        traj = chain_trajectory(nodes)
        out = abstract(traj, SchemeSpec(kind="topology", graph=graph,
                                        with_hubs=True))
        # chain hubs: 0.5 for the four sources, 0 for the sink n4
        assert np.asarray(out.steps[0].action)[-1] == pytest.approx(0.0, abs=1e-9)
        assert np.asarray(out.steps[1].action)[-1] == pytest.approx(0.5, abs=1e-9)

    def test_determinism(self):
        nodes, graph = chain_graph()
        traj = chain_trajectory(nodes)
        spec = SchemeSpec(kind="topology", graph=graph)
        a = abstract(traj, spec)
        b = abstract(traj, spec)
        for sa, sb in zip(a.steps, b.steps):
            assert np.array_equal(sa.state, sb.state)
            assert np.array_equal(np.asarray(sa.action), np.asarray(sb.action))

    def test_entity_outside_graph_rejected(self):
        nodes, graph = chain_graph()
        stranger = Entity(name="zz", etype="Pod")
        steps = (RawStep(turn_index=0, chosen_entity=stranger,
                         candidate_entities=(stranger,)),)
        traj = RawTrajectory(trajectory_id="t", scenario_id="s",
                             symptom_entity=nodes[4], steps=steps,
                             scores=JudgeScores(0.0, 0.0))
        with pytest.raises(EntityNotInGraph):
            abstract(traj, SchemeSpec(kind="topology", graph=graph))

    def test_features_nonnegative_and_sentinel_exceeds_diameter(self):
        nodes, graph = chain_graph()
        traj = chain_trajectory(nodes)
        feat = TopologyFeaturizer(graph)
        assert feat.sentinel == 5.0
        out = abstract(traj, SchemeSpec(kind="topology", graph=graph))
        for step in out.steps:
            assert np.all(step.state >= 0)
            assert np.all(np.asarray(step.action) >= 0)


class TestHmmAugmentation:
    def test_single_state_appends_constant(self):
        nodes, graph = chain_graph()
        traj = abstract(chain_trajectory(nodes),
                        SchemeSpec(kind="topology", graph=graph))
        obs = hmm_observations(traj)
        model = Hmm(
            initial=np.array([1.0]), transition=np.array([[1.0]]),
            means=obs.mean(axis=0, keepdims=True),
            variances=np.ones((1, obs.shape[1])),
        )
        out = augment_with_hmm(traj, model)
        for step in out.steps:
            assert step.state[-1] == 1.0
            assert step.state.shape[0] == traj.steps[0].state.shape[0] + 1

    def test_onehot_matches_decoder_output(self):
        nodes, graph = chain_graph()
        traj = abstract(chain_trajectory(nodes),
                        SchemeSpec(kind="topology", graph=graph))
        obs = hmm_observations(traj)
        rng = np.random.default_rng(0)
        model = Hmm(
            initial=np.array([0.5, 0.5]),
            transition=np.array([[0.7, 0.3], [0.4, 0.6]]),
            means=np.stack([obs[0], obs[-1]]) + rng.normal(0, 0.1, (2, obs.shape[1])),
            variances=np.ones((2, obs.shape[1])),
        )
        path = viterbi_decode(model, obs)
        out = augment_with_hmm(traj, model)
        for step, z in zip(out.steps, path):
            onehot = step.state[-2:]
            assert onehot[z] == 1.0 and onehot.sum() == 1.0

    def test_requires_topology_scheme(self):
        a = Entity(name="a", etype="Pod")
        steps = (RawStep(turn_index=0, chosen_entity=a, candidate_entities=(a,)),)
        traj = RawTrajectory(trajectory_id="t", scenario_id="s", symptom_entity=a,
                             steps=steps, scores=JudgeScores(0.0, 0.0))
        out = abstract(traj, SchemeSpec(kind="name", vocabulary=("a",)))
        with pytest.raises(SchemeMismatch):
            hmm_observations(out)


def test_abstract_corpus_round_trip(tmp_path):
    nodes, graph = chain_graph()
    traj = abstract(chain_trajectory(nodes), SchemeSpec(kind="topology", graph=graph))
    path = tmp_path / "abstract.jsonl"
    save_abstract_corpus([traj], path)
    loaded = load_abstract_corpus(path)
    assert len(loaded) == 1
    got = loaded[0]
    assert got.trajectory_id == traj.trajectory_id
    assert got.scheme == "topology"
    for sa, sb in zip(got.steps, traj.steps):
        assert np.array_equal(sa.state, sb.state)
        assert np.array_equal(np.asarray(sa.action), np.asarray(sb.action))
        assert sa.reward == sb.reward
        for ca, cb in zip(sa.candidates, sb.candidates):
            assert np.array_equal(np.asarray(ca), np.asarray(cb))
