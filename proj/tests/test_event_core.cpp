#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "evslice/event_core.hpp"

using namespace evslice;

namespace {

EventStream random_stream(std::mt19937_64& rng, int width = 32, int height = 24,
                          int n = 200, std::int64_t span = 10000) {
    EventStream s;
    s.width = width;
    s.height = height;
    s.t0 = 0;
    s.span = span;
    std::uniform_int_distribution<int> xd(0, width - 1), yd(0, height - 1), pd(0, 1);
    std::uniform_int_distribution<std::int64_t> td(0, span - 1);
    for (int i = 0; i < n; ++i) {
        s.events.push_back(Event{xd(rng), yd(rng), td(rng), pd(rng) ? 1 : -1});
    }
    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    return s;
}

}  // namespace

TEST_CASE("csv parsing: empty file with valid header") {
    std::istringstream in("x,y,t,p\n");
    const EventStream s = parse_events_csv(in, 10, 10);
    CHECK(s.events.empty());
    CHECK(s.width == 10);
    CHECK(s.span == 0);
}

TEST_CASE("csv parsing: single row maps fields directly") {
    std::istringstream in("x,y,t,p\n3,4,100,1\n");
    const EventStream s = parse_events_csv(in, 10, 10);
    REQUIRE(s.events.size() == 1);
    CHECK(s.events[0] == Event{3, 4, 100, 1});
}

TEST_CASE("csv parsing: zero polarity maps to -1") {
    std::istringstream in("x,y,t,p\n1,1,5,0\n2,2,6,-1\n");
    const EventStream s = parse_events_csv(in, 10, 10);
    CHECK(s.events[0].p == -1);
    CHECK(s.events[1].p == -1);
}

TEST_CASE("csv parsing: unsorted input comes back sorted by t") {
    std::istringstream in("x,y,t,p\n1,1,200,1\n2,2,100,1\n");
    const EventStream s = parse_events_csv(in, 10, 10);
    // oracle: naive sort of the raw rows
    std::vector<std::int64_t> ts{200, 100};
    std::sort(ts.begin(), ts.end());
    REQUIRE(s.events.size() == 2);
    CHECK(s.events[0].t == ts[0]);
    CHECK(s.events[1].t == ts[1]);
    CHECK(s.events[0].x == 2);
}

TEST_CASE("csv parsing: malformed rows are rejected with location") {
    std::istringstream bad_field("x,y,t,p\n1,1,nope,1\n");
    CHECK_THROWS_WITH_AS(parse_events_csv(bad_field, 10, 10),
                         doctest::Contains("line 2"), std::invalid_argument);
    std::istringstream bad_pol("x,y,t,p\n1,1,5,7\n");
    CHECK_THROWS_AS(parse_events_csv(bad_pol, 10, 10), std::invalid_argument);
    std::istringstream oob("x,y,t,p\n99,1,5,1\n");
    CHECK_THROWS_AS(parse_events_csv(oob, 10, 10), std::invalid_argument);
    std::istringstream bad_header("a,b\n");
    CHECK_THROWS_AS(parse_events_csv(bad_header, 10, 10), std::invalid_argument);
}

TEST_CASE("parse/serialize round trip in both formats") {
    std::mt19937_64 rng(7);
    const EventStream s = random_stream(rng);

    std::stringstream csv;
    write_events_csv(s, csv);
    const EventStream s_csv = parse_events_csv(csv, s.width, s.height);
    CHECK(s_csv.events == s.events);

    std::stringstream bin(std::ios::in | std::ios::out | std::ios::binary);
    write_events_binary(s, bin);
    const EventStream s_bin = parse_events_binary(bin);
    CHECK(s_bin.events == s.events);
    CHECK(s_bin.width == s.width);
    CHECK(s_bin.height == s.height);
}

TEST_CASE("binary parsing: bad magic and truncation rejected") {
    std::stringstream bad("XXXX", std::ios::in | std::ios::out | std::ios::binary);
    CHECK_THROWS_AS(parse_events_binary(bad), std::invalid_argument);
}

TEST_CASE("voxel grid: empty stream gives all zeros") {
    EventStream s;
    s.width = 4;
    s.height = 4;
    s.span = 100;
    const VoxelGrid g = to_voxel_grid(s, 0, 100, 5, 4, 4);
    CHECK(g.mass() == 0.0);
}

TEST_CASE("voxel grid: event at a bin center lands entirely in that bin") {
    EventStream s;
    s.width = 4;
    s.height = 4;
    s.span = 100;
    // 5 bins over [0,100): center of bin 2 is at t = 50
    s.events.push_back(Event{1, 1, 50, 1});
    const VoxelGrid g = to_voxel_grid(s, 0, 100, 5, 4, 4);
    CHECK(g.at(2, 1, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(g.mass() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("voxel grid: event midway between bin centers splits 0.5/0.5") {
    EventStream s;
    s.width = 4;
    s.height = 4;
    s.span = 1000;
    // 5 bins over [0,1000): centers at 0,250,500,...; midway of bins 1,2 = 375
    s.events.push_back(Event{2, 3, 375, 1});
    const VoxelGrid g = to_voxel_grid(s, 0, 1000, 5, 4, 4);
    CHECK(g.at(1, 3, 2) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(g.at(2, 3, 2) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("voxel grid: mass conservation on random streams") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const EventStream s = random_stream(rng);
        const VoxelGrid g = to_voxel_grid(s, 0, s.span, 5, s.height, s.width);
        CHECK(std::abs(g.mass() - static_cast<double>(s.size())) < 1e-6);
    }
}

TEST_CASE("voxel grid: signed mode accumulates polarity") {
    EventStream s;
    s.width = 2;
    s.height = 2;
    s.span = 10;
    s.events.push_back(Event{0, 0, 0, 1});
    s.events.push_back(Event{0, 0, 0, -1});
    const VoxelGrid g = to_voxel_grid(s, 0, 10, 1, 2, 2, VoxelPolarity::signed_polarity);
    CHECK(g.at(0, 0, 0) == 0.0);
}

TEST_CASE("voxel grid: invalid arguments") {
    EventStream s;
    s.width = 2;
    s.height = 2;
    s.span = 10;
    CHECK_THROWS_AS(to_voxel_grid(s, 5, 5, 1, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(to_voxel_grid(s, 0, 10, 0, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(to_voxel_grid(s, 0, 10, 1, -1, 2), std::invalid_argument);
}

TEST_CASE("micro-bin features: concentration in the first interval") {
    EventStream s;
    s.width = 10;
    s.height = 10;
    s.span = 400;
    for (int i = 0; i < 5; ++i) s.events.push_back(Event{i, i, i * 10, 1});
    const StepFeatures f = micro_bin_features(s, 4);
    CHECK(f.steps[0][0] == doctest::Approx(1.0));
    CHECK(f.steps[1][0] == 0.0);
    CHECK(f.steps[2][0] == 0.0);
    CHECK(f.steps[3][0] == 0.0);
    CHECK(f.steps[1] == std::array<double, 3>{0.0, 0.0, 0.0});
}

TEST_CASE("micro-bin features: uniform polarity gives balance 1") {
    std::mt19937_64 rng(3);
    EventStream s = random_stream(rng);
    for (Event& e : s.events) e.p = 1;
    const StepFeatures f = micro_bin_features(s, 8);
    for (const auto& step : f.steps) {
        if (step[0] > 0) CHECK(step[1] == doctest::Approx(1.0));
    }
}

TEST_CASE("micro-bin features: matches a naive per-interval loop oracle") {
    std::mt19937_64 rng(5);
    const EventStream s = random_stream(rng, 32, 24, 300, 9000);
    const int n_steps = 6;
    const StepFeatures f = micro_bin_features(s, n_steps);

    const double step_len = static_cast<double>(s.span) / n_steps;
    std::vector<std::vector<Event>> buckets(n_steps);
    for (const Event& e : s.events) {
        int k = std::min(n_steps - 1, static_cast<int>((e.t - s.t0) / step_len));
        buckets[static_cast<std::size_t>(k)].push_back(e);
    }
    std::size_t max_count = 0;
    for (const auto& b : buckets) max_count = std::max(max_count, b.size());
    for (int k = 0; k < n_steps; ++k) {
        const auto& b = buckets[static_cast<std::size_t>(k)];
        if (b.empty()) {
            CHECK(f.steps[static_cast<std::size_t>(k)] == std::array<double, 3>{0, 0, 0});
            continue;
        }
        double pos = 0, mx = 0, my = 0;
        for (const Event& e : b) {
            if (e.p > 0) pos += 1;
            mx += e.x;
            my += e.y;
        }
        mx /= static_cast<double>(b.size());
        my /= static_cast<double>(b.size());
        double vx = 0, vy = 0;
        for (const Event& e : b) {
            vx += (e.x - mx) * (e.x - mx);
            vy += (e.y - my) * (e.y - my);
        }
        vx /= static_cast<double>(b.size());
        vy /= static_cast<double>(b.size());
        const double disp = std::clamp(
            (std::sqrt(vx) + std::sqrt(vy)) / ((s.width + s.height) / 2.0), 0.0, 1.0);
        const auto& got = f.steps[static_cast<std::size_t>(k)];
        CHECK(got[0] == doctest::Approx(static_cast<double>(b.size()) / max_count).epsilon(1e-12));
        CHECK(got[1] == doctest::Approx((2 * pos - b.size()) / b.size()).epsilon(1e-12));
        CHECK(got[2] == doctest::Approx(disp).epsilon(1e-9));
    }
}

TEST_CASE("micro-bin features: rejects n_steps < 2") {
    std::mt19937_64 rng(1);
    const EventStream s = random_stream(rng);
    CHECK_THROWS_AS(micro_bin_features(s, 1), std::invalid_argument);
}

TEST_CASE("slice_window: identity, empty, and brute-force membership") {
    std::mt19937_64 rng(17);
    const EventStream s = random_stream(rng);

    const EventStream full = slice_window(s, s.t0, s.t_end());
    CHECK(full.events == s.events);

    // region guaranteed empty: slice after all timestamps
    EventStream padded = s;
    padded.span = s.span + 1000;
    const EventStream empty = slice_window(padded, s.span + 1, s.span + 500);
    CHECK(empty.events.empty());
    CHECK(empty.t0 == s.span + 1);
    CHECK(empty.span == 499);

    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<std::int64_t> cut(0, s.span);
        std::int64_t a = cut(rng), b = cut(rng);
        if (a == b) continue;
        if (a > b) std::swap(a, b);
        const EventStream sliced = slice_window(s, a, b);
        std::vector<Event> oracle;
        for (const Event& e : s.events) {
            if (e.t >= a && e.t < b) oracle.push_back(e);
        }
        CHECK(sliced.events == oracle);
    }
}

TEST_CASE("slice_window: partition reproduces the original multiset") {
    std::mt19937_64 rng(23);
    const EventStream s = random_stream(rng);
    const std::vector<std::int64_t> cuts{0, 1000, 3333, 7000, s.span};
    std::vector<Event> merged;
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        const EventStream part = slice_window(s, cuts[i], cuts[i + 1]);
        merged.insert(merged.end(), part.events.begin(), part.events.end());
    }
    CHECK(merged == s.events);
}

TEST_CASE("slice_window: invalid bounds rejected") {
    std::mt19937_64 rng(29);
    const EventStream s = random_stream(rng);
    CHECK_THROWS_AS(slice_window(s, 10, 10), std::invalid_argument);
    CHECK_THROWS_AS(slice_window(s, -5, 10), std::invalid_argument);
    CHECK_THROWS_AS(slice_window(s, 0, s.span + 1), std::invalid_argument);
}

TEST_CASE("gen_synthetic: zero objects, zero noise gives an empty stream") {
    SyntheticSceneSpec spec;
    spec.width = 16;
    spec.height = 16;
    spec.duration_us = 1000;
    spec.seed = 1;
    const auto [stream, gt] = gen_synthetic(spec);
    CHECK(stream.events.empty());
    CHECK(gt.objects.empty());
}

TEST_CASE("gen_synthetic: static object emits only on its edge pixels") {
    SyntheticSceneSpec spec;
    spec.width = 32;
    spec.height = 32;
    spec.duration_us = 10000;
    spec.edge_event_rate = 0.01;
    spec.seed = 42;
    spec.objects.push_back(ObjectSpec{16.0, 16.0, 8.0, 6.0, 0.0, 0.0, 0});
    const auto [stream, gt] = gen_synthetic(spec);
    REQUIRE(!stream.events.empty());

    // edge-membership oracle from the box geometry
    const Box b = gt.box_at(gt.objects[0], 0);
    const int x0 = static_cast<int>(std::lround(b.left()));
    const int y0 = static_cast<int>(std::lround(b.top()));
    const int x1 = x0 + static_cast<int>(std::lround(b.w)) - 1;
    const int y1 = y0 + static_cast<int>(std::lround(b.h)) - 1;
    for (const Event& e : stream.events) {
        const bool on_x_edge = (e.x == x0 || e.x == x1) && e.y >= y0 && e.y <= y1;
        const bool on_y_edge = (e.y == y0 || e.y == y1) && e.x >= x0 && e.x <= x1;
        CHECK((on_x_edge || on_y_edge));
    }
}

TEST_CASE("gen_synthetic: identical spec and seed is bit-identical") {
    SyntheticSceneSpec spec;
    spec.width = 24;
    spec.height = 24;
    spec.duration_us = 5000;
    spec.edge_event_rate = 0.02;
    spec.noise_rate = 0.0001;
    spec.seed = 99;
    spec.objects.push_back(ObjectSpec{10.0, 12.0, 6.0, 6.0, 0.001, 0.0, 1});
    const auto [s1, g1] = gen_synthetic(spec);
    const auto [s2, g2] = gen_synthetic(spec);
    CHECK(s1.events == s2.events);
}

TEST_CASE("gen_synthetic: invalid specs rejected") {
    SyntheticSceneSpec spec;
    spec.width = 8;
    spec.height = 8;
    spec.duration_us = 0;
    CHECK_THROWS_AS(gen_synthetic(spec), std::invalid_argument);
    spec.duration_us = 100;
    spec.objects.push_back(ObjectSpec{4, 4, 20, 4, 0, 0, 0});
    CHECK_THROWS_AS(gen_synthetic(spec), std::invalid_argument);
}

TEST_CASE("scene spec and ground truth JSON round trips") {
    SyntheticSceneSpec spec;
    spec.width = 24;
    spec.height = 20;
    spec.duration_us = 5000;
    spec.edge_event_rate = 0.02;
    spec.seed = 7;
    spec.objects.push_back(ObjectSpec{10.0, 12.0, 6.0, 5.0, 0.001, -0.0005, 3});
    const SyntheticSceneSpec back = scene_spec_from_json(scene_spec_to_json(spec));
    CHECK(back.width == spec.width);
    CHECK(back.objects.size() == 1);
    CHECK(back.objects[0].vy == spec.objects[0].vy);
    CHECK(back.objects[0].class_id == 3);

    const auto [stream, gt] = gen_synthetic(spec);
    const GroundTruth gt2 = ground_truth_from_json(ground_truth_to_json(gt));
    CHECK(gt2.duration == gt.duration);
    CHECK(gt2.objects[0].x0 == gt.objects[0].x0);
    const auto boxes = gt2.boxes_at(2500);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].first.x == doctest::Approx(10.0 + 0.001 * 2500));
    CHECK(boxes[0].second == 3);
}

TEST_CASE("ground truth masks cover the box interior") {
    SyntheticSceneSpec spec;
    spec.width = 16;
    spec.height = 16;
    spec.duration_us = 100;
    spec.objects.push_back(ObjectSpec{8.0, 8.0, 4.0, 4.0, 0.0, 0.0, 0});
    const auto [stream, gt] = gen_synthetic(spec);
    const auto mask = gt.mask_at(50, 0);
    int on = 0;
    for (auto v : mask) on += v;
    CHECK(on == 16);  // 4x4 interior
    CHECK(mask[8 * 16 + 8] == 1);
    CHECK(mask[0] == 0);
}
