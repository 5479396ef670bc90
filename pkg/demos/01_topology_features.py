"""Propagation graphs and the relativized feature view of a diagnosis walk.

Builds a small service topology, queries distances and hub scores, then
abstracts a scripted three-turn exploration into the feature vectors a
policy would consume.
"""

import numpy as np

from twinmdp import (
    Entity,
    JudgeScores,
    RawStep,
    RawTrajectory,
    SchemeSpec,
    abstract,
    hubs_scores,
    make_graph,
    shortest_distance,
)

# A tiny incident: a database fault cascades through a cache into the
# frontend, where the alert fires. Two side services are healthy bystanders.
db = Entity("db", "Pod")
cache = Entity("cache", "Service")
front = Entity("frontend", "Pod")
jobs = Entity("jobs", "Deployment")
logs = Entity("logs", "Service")

graph = make_graph(
    [db, cache, front, jobs, logs],
    [(db, cache), (cache, front), (db, jobs), (jobs, logs)],
)

print("== distances (direction of propagation) ==")
print("db    -> frontend:", shortest_distance(graph, db, front))
print("front -> db      :", shortest_distance(graph, front, db), "(cannot go upstream)")
print("db    -> logs    :", shortest_distance(graph, db, logs))

print("\n== hub scores ==")
for entity, score in sorted(hubs_scores(graph).items()):
    print(f"  {entity.name:10s} {score:.4f}")

# The agent starts at the alerting entity and walks backward.
steps = (
    RawStep(turn_index=0, chosen_entity=front, candidate_entities=(front,),
            assessments={front: "cascading"}),
    RawStep(turn_index=1, chosen_entity=cache, candidate_entities=(cache, logs),
            assessments={front: "cascading", cache: "cascading"}),
    RawStep(turn_index=2, chosen_entity=db, candidate_entities=(db,),
            assessments={front: "cascading", cache: "cascading", db: "primary"}),
)
walk = RawTrajectory(
    trajectory_id="demo-walk", scenario_id="demo", symptom_entity=front,
    steps=steps, scores=JudgeScores(fpc_accuracy=100.0, rce_identification=100.0),
)

view = abstract(walk, SchemeSpec(kind="topology", graph=graph))
print("\n== topology-scheme abstraction ==")
print("state features: [min dist symptom->flagged-primary, ...->flagged-cascading]")
print("action features: [d(target,prev), d(target,symptom),")
print("                  min d(target,primary), min d(target,cascading)]")
for t, step in enumerate(view.steps):
    print(f"turn {t}: state={step.state.tolist()} "
          f"action={np.asarray(step.action).tolist()}")
print("\nunreachable pairs use the sentinel (graph diameter + 1 ="
      f" {view.steps[0].state[0]:.0f})")

# The name scheme instead keys everything by entity identity.
name_view = abstract(
    walk, SchemeSpec(kind="name", vocabulary=("cache", "db", "frontend",
                                              "jobs", "logs")),
)
print("\n== name-scheme abstraction (2 primary / 1 cascading / 0 unknown) ==")
for t, step in enumerate(name_view.steps):
    print(f"turn {t}: state={step.state.tolist()} action index={step.action}")
