from infusion_concurrence import EpisodeState

from protocol_fuzz import run_sequence


def test_random_sequences_hold_invariants(library):
    coverage = set()
    failures = {}
    for seed in range(3000):
        problems = run_sequence(library, seed, coverage=coverage)
        if problems:
            failures[seed] = problems
    assert failures == {}
    # the sequences must actually exercise the interesting paths
    assert coverage == set(EpisodeState) - {EpisodeState.COMPLETED}
