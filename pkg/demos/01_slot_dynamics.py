"""Walk a three-agent scenario through a handful of slots by hand."""
from survsched.model import (ScenarioConfig, initial_state, state_index, state_space_size,
                             step_dynamics, transition_branches)

# Three agents with increasingly bad channels; the last one splits its payload in two packets.
scenario = ScenarioConfig.from_lists(p=[1e-3, 1e-2, 1e-1], C=[1, 1, 2], tau=3)
print("states in the table:", state_space_size(scenario))

state = initial_state(scenario)
print("start:", state, "index", state_index(state, scenario))

# Serve agent 2 twice (its two packets get through), then let it starve while the others are served.
script = [(2, True), (2, True), (0, True), (1, True), (0, False), (1, True), (0, True)]
for slot, (agent, received) in enumerate(script):
    state, events, reward = step_dynamics(state, agent, received, scenario)
    print(f"slot {slot}: serve {agent} {'ok  ' if received else 'lost'} -> {state}"
          f"  completed={events.payload_complete} failed={sorted(events.failures)} reward={reward}")

# From any state an allocation only has two outcomes.
for b in transition_branches(state, 2, scenario):
    print(f"serve 2: prob {b.probability:.3f} -> {b.next_state} reward {b.reward}")
