#include <doctest.h>

#include <deque>
#include <iostream>

#include "test_support.hpp"
#include "worldfuse/dataset.hpp"
#include "worldfuse/domains.hpp"
#include "worldfuse/sim.hpp"
#include "worldfuse/vocab.hpp"

using namespace worldfuse;

namespace {

Scene two_room_scene() {
    Scene s;
    s.id = "fixture";
    s.rooms = {"kitchen", "bedroom"};
    s.adjacency = {{"bedroom", "kitchen"}};
    s.start_room = "kitchen";
    auto add = [&](const std::string& n, const std::string& room, bool g, bool o, bool w,
                   bool c, bool surf) {
        ObjectInfo info;
        info.room = room;
        info.grabbable = g;
        info.openable = o;
        info.switchable = w;
        info.container = c;
        info.surface = surf;
        info.place_rel = "inside";
        info.place_target = room;
        s.objects[n] = info;
    };
    add("fridge", "kitchen", false, true, false, true, false);
    add("kitchentable", "kitchen", false, false, false, false, true);
    add("stove", "kitchen", false, false, true, false, false);
    add("apple", "kitchen", true, false, false, false, false);
    add("bed", "bedroom", false, false, false, false, true);
    add("tv", "bedroom", false, false, true, false, false);
    add("clock", "bedroom", true, false, false, false, false);
    return s;
}

// Dumb independent shortest-path search used as the expert oracle: plain BFS
// over raw action strings with no shared code beyond the transition function.
int oracle_shortest_len(const Scene& scene, const State& start,
                        const std::vector<Triple>& goal, int cap) {
    if (goal_satisfied(start, goal)) return 0;
    std::deque<std::pair<State, int>> q;
    std::unordered_set<uint64_t> seen;
    q.push_back({start, 0});
    seen.insert(start.hash());
    std::vector<std::string> acts = parseable_actions(scene);
    while (!q.empty()) {
        auto [st, d] = q.front();
        q.pop_front();
        if (d >= cap) continue;
        for (const auto& a : acts) {
            State nxt = step(scene, st, a);
            if (nxt.triples == st.triples) continue;
            if (!seen.insert(nxt.hash()).second) continue;
            if (goal_satisfied(nxt, goal)) return d + 1;
            q.push_back({nxt, d + 1});
        }
    }
    return -1;
}

}  // namespace

TEST_CASE("walk moves the character between adjacent rooms") {
    Scene s = two_room_scene();
    State st = initial_state(s);
    CHECK(st.character_room() == "kitchen");
    State nxt = step(s, st, "walk bedroom");
    CHECK(nxt.character_room() == "bedroom");
    CHECK(!nxt.has({"character", "inside", "kitchen"}));
    CHECK(nxt.step == 1);
}

TEST_CASE("infeasible actions only advance the step counter") {
    Scene s = two_room_scene();
    State st = initial_state(s);
    st = step(s, st, "walk bedroom");
    // apple is in the kitchen; grabbing from the bedroom is parseable but infeasible
    State nxt = step(s, st, "grab apple");
    CHECK(nxt.triples == st.triples);
    CHECK(nxt.step == st.step + 1);
}

TEST_CASE("unparseable actions are a distinct error") {
    Scene s = two_room_scene();
    State st = initial_state(s);
    CHECK_THROWS_AS(step(s, st, "dance apple"), parse_error);
    CHECK_THROWS_AS(step(s, st, "grab stove"), parse_error);      // not grabbable
    CHECK_THROWS_AS(step(s, st, "putin apple tv"), parse_error);  // not a container
    CHECK_THROWS_AS(step(s, st, "grab apple fridge"), parse_error);
    CHECK_NOTHROW(step(s, st, "grab clock"));  // infeasible, not a parse error
}

TEST_CASE("grab from closed container requires opening") {
    Scene s = two_room_scene();
    s.objects["apple"].place_rel = "inside";
    s.objects["apple"].place_target = "fridge";
    State st = initial_state(s);
    CHECK(!action_feasible(s, st, "grab apple"));
    st = step(s, st, "open fridge");
    CHECK(st.flag_is("fridge", "open"));
    CHECK(action_feasible(s, st, "grab apple"));
    st = step(s, st, "grab apple");
    CHECK(st.held_object() == "apple");
    CHECK(!st.location_of("apple").has_value());
}

TEST_CASE("goal_satisfied subset semantics") {
    Scene s = two_room_scene();
    State st = initial_state(s);
    CHECK(goal_satisfied(st, {}));
    CHECK(!goal_satisfied(st, {{"stove", "is", "on"}}));
    st = step(s, st, "switchon stove");
    CHECK(goal_satisfied(st, {{"stove", "is", "on"}}));
}

TEST_CASE("frame property: step touches only the action's triples") {
    Scene s = two_room_scene();
    State st = initial_state(s);
    Rng rng(314);
    std::vector<std::string> acts = parseable_actions(s);
    for (int i = 0; i < 60; ++i) {
        std::string a = acts[static_cast<size_t>(rng.uniform_int(static_cast<int>(acts.size())))];
        State nxt = step(s, st, a);
        std::vector<Triple> changed;
        for (const auto& t : st.triples)
            if (!nxt.triples.count(t)) changed.push_back(t);
        for (const auto& t : nxt.triples)
            if (!st.triples.count(t)) changed.push_back(t);
        // every changed triple mentions the action's arguments or the character
        Action act = parse_action(s, a);
        for (const auto& t : changed) {
            bool mentions = t.s == "character" || t.s == act.arg1 || t.s == act.arg2 ||
                            t.o == act.arg1 || t.o == act.arg2;
            CHECK(mentions);
        }
        CHECK(changed.size() <= 4);
        st = nxt;
    }
}

TEST_CASE("transition determinism and golden fuzz trace") {
    Scene s = two_room_scene();
    State a = initial_state(s);
    State b = initial_state(s);
    Rng r1(777), r2(777);
    std::vector<std::string> acts = parseable_actions(s);
    for (int i = 0; i < 50; ++i) {
        std::string act1 = acts[static_cast<size_t>(r1.uniform_int(static_cast<int>(acts.size())))];
        std::string act2 = acts[static_cast<size_t>(r2.uniform_int(static_cast<int>(acts.size())))];
        REQUIRE(act1 == act2);
        a = step(s, a, act1);
        b = step(s, b, act2);
    }
    CHECK(a.hash() == b.hash());
    // recorded once from the reference rule set
    CHECK(a.hash() == 0xae03653b5751256bull);
}

TEST_CASE("expert planner: trivial and short plans") {
    Scene s = two_room_scene();
    State st = initial_state(s);
    CHECK(plan_expert(s, st, {}, 30).empty());

    // tv is in the bedroom: walk + switchon
    Instruction ins;
    ins.text = "turnon tv";
    ins.goal = {{"tv", "is", "on"}};
    Trajectory t = expert_rollout(s, ins, 30);
    CHECK(t.success);
    CHECK(t.steps.size() == 2);

    // stove is in the current room: single action
    Instruction ins2;
    ins2.text = "turnon stove";
    ins2.goal = {{"stove", "is", "on"}};
    CHECK(expert_rollout(s, ins2, 30).steps.size() == 1);
}

TEST_CASE("expert plan length equals exhaustive-search optimum") {
    for (uint64_t seed = 1; seed <= 6; ++seed) {
        DomainSpec spec;
        spec.id = "probe";
        spec.room_archetypes = {"kitchen", "hallway"};
        spec.task_types = {TaskType::PlaceIn, TaskType::PutOn};
        spec.num_instructions = 3;
        auto [scene, instructions] = generate_domain(seed, spec);
        State init = initial_state(scene);
        for (const auto& ins : instructions) {
            std::vector<std::string> plan = plan_expert(scene, init, ins.goal, 30);
            int best = oracle_shortest_len(scene, init, ins.goal, 30);
            CHECK(static_cast<int>(plan.size()) == best);
        }
    }
}

TEST_CASE("planner horizon overflow raises planning_error") {
    Scene s = two_room_scene();
    State st = initial_state(s);
    Instruction ins;
    ins.goal = {{"apple", "on", "bed"}};  // needs grab + 2 walks + put
    CHECK_THROWS_AS(plan_expert(s, st, ins.goal, 2), planning_error);
}

TEST_CASE("generate_domain determinism and contracts") {
    DomainSpec spec;
    spec.id = "probe";
    spec.room_archetypes = {"livingroom", "hallway"};
    spec.task_types = {TaskType::TurnOn};
    spec.num_instructions = 5;

    auto [s1, i1] = generate_domain(7, spec);
    auto [s2, i2] = generate_domain(7, spec);
    CHECK(s1.hash() == s2.hash());
    REQUIRE(i1.size() == i2.size());
    for (size_t i = 0; i < i1.size(); ++i) CHECK(i1[i].text == i2[i].text);
    CHECK(static_cast<int>(i1.size()) == spec.num_instructions);

    // goals reference switchable livingroom objects only
    for (const auto& ins : i1) {
        REQUIRE(ins.goal.size() == 1);
        CHECK(ins.goal[0].r == "is");
        CHECK(ins.goal[0].o == "on");
        CHECK(s1.objects.at(ins.goal[0].s).switchable);
    }

    auto [s3, i3] = generate_domain(8, spec);
    CHECK(s3.hash() != s1.hash());
}

TEST_CASE("generate_domain rejects unsatisfiable specs") {
    DomainSpec spec;
    spec.id = "bad";
    spec.room_archetypes = {"hallway"};  // only a bench: nothing switchable
    spec.task_types = {TaskType::TurnOn};
    spec.num_instructions = 1;
    CHECK_THROWS_AS(generate_domain(1, spec), generation_error);
}

TEST_CASE("every generated instruction's expert rollout succeeds") {
    for (const auto& spec : default_seen_specs()) {
        auto [scene, instructions] = generate_domain(11, spec);
        for (const auto& ins : instructions) {
            Trajectory t = expert_rollout(scene, ins, 30, spec.id);
            CHECK(t.success);
            CHECK(static_cast<int>(t.steps.size()) <= 30);
            // trajectory invariant: success <=> final state contains goal
            if (!t.steps.empty())
                CHECK(goal_satisfied(t.steps.back().after, ins.goal));
        }
    }
}

TEST_CASE("trajectory JSONL round-trip via replay") {
    DomainSpec spec = default_seen_specs()[0];
    spec.num_instructions = 4;
    auto [scene, instructions] = generate_domain(21, spec);
    std::vector<Trajectory> trajs;
    for (const auto& ins : instructions) trajs.push_back(expert_rollout(scene, ins, 30, spec.id));

    testsupport::TempDir tmp("jsonl");
    std::string path = tmp.str() + "/episodes.jsonl";
    write_trajectories(path, trajs);
    std::vector<Trajectory> back = read_trajectories(path, scene, spec.id);
    REQUIRE(back.size() == trajs.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].instruction.text == trajs[i].instruction.text);
        CHECK(back[i].success == trajs[i].success);
        REQUIRE(back[i].steps.size() == trajs[i].steps.size());
        for (size_t k = 0; k < back[i].steps.size(); ++k) {
            CHECK(back[i].steps[k].action == trajs[i].steps[k].action);
            CHECK(back[i].steps[k].after.triples == trajs[i].steps[k].after.triples);
        }
    }
}

TEST_CASE("scene JSON round-trip") {
    auto [scene, unused] = generate_domain(33, default_seen_specs()[2]);
    json j = scene_to_json(scene);
    Scene back = scene_from_json(j);
    CHECK(back.hash() == scene.hash());
}

TEST_CASE("vocabulary is closed and round-trips sequences") {
    const Vocabulary& v = vocab();
    CHECK(v.size() > 60);
    CHECK(v.word(v.id("apple")) == "apple");
    CHECK_THROWS_AS(v.id("zebra"), argument_error);

    Scene s = two_room_scene();
    State st = initial_state(s);
    Instruction ins;
    ins.text = "puton apple bed";
    ins.task_type = TaskType::PutOn;
    std::vector<int> prompt = seq::policy_prompt(ins, st);
    CHECK(prompt.front() == v.task_act());
    CHECK(prompt.back() == v.id("action:"));
    // deterministic: same state renders to the same tokens
    CHECK(seq::policy_prompt(ins, st) == prompt);
}

TEST_CASE("sequence examples mask exactly the target segment") {
    Scene s = two_room_scene();
    State st = initial_state(s);
    Instruction ins;
    ins.text = "turnon stove";
    SeqExample ex = seq::cloning_example(ins, st, "switchon stove", "probe");
    // masked targets decode to the action plus <eoa>
    std::vector<int> masked;
    for (size_t t = 0; t < ex.mask.size(); ++t)
        if (ex.mask[t]) masked.push_back(ex.targets[t]);
    REQUIRE(masked.size() == 3);
    CHECK(vocab().word(masked[0]) == "switchon");
    CHECK(vocab().word(masked[1]) == "stove");
    CHECK(masked[2] == vocab().eoa());

    State nxt = step(s, st, "switchon stove");
    SeqExample dyn = seq::dynamics_example(st, "switchon stove", nxt, "probe");
    std::vector<int> dyn_masked;
    for (size_t t = 0; t < dyn.mask.size(); ++t)
        if (dyn.mask[t]) dyn_masked.push_back(dyn.targets[t]);
    CHECK(vocab().decode(dyn_masked) == "<add> stove is on <del> stove is off <eoa>");

    State same = step(s, nxt, "switchon stove");  // infeasible now
    SeqExample noop = seq::dynamics_example(nxt, "switchon stove", same, "probe");
    std::vector<int> noop_masked;
    for (size_t t = 0; t < noop.mask.size(); ++t)
        if (noop.mask[t]) noop_masked.push_back(noop.targets[t]);
    CHECK(vocab().decode(noop_masked) == "<nochange> <eoa>");
}
