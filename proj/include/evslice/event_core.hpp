#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "evslice/box.hpp"

namespace evslice {

// Single camera event. Timestamps are microseconds, polarity is -1 or +1.
struct Event {
    int x = 0;
    int y = 0;
    std::int64_t t = 0;
    int p = 1;

    friend bool operator==(const Event&, const Event&) = default;
};

// Ordered event sequence over the half-open window [t0, t0 + span).
struct EventStream {
    std::vector<Event> events;
    int width = 0;
    int height = 0;
    std::int64_t t0 = 0;
    std::int64_t span = 0;

    std::int64_t t_end() const { return t0 + span; }
    bool empty() const { return events.empty(); }
    std::size_t size() const { return events.size(); }
};

// Throws std::invalid_argument if any stream invariant is violated.
void validate(const EventStream& stream);

enum class EventFormat { csv, packed_binary };

// Parses events from a file. CSV needs the sensor size up front; the packed
// binary header carries its own. Events come back sorted by t (stable).
EventStream parse_events(const std::string& path, EventFormat format,
                         int sensor_width = 0, int sensor_height = 0);
EventStream parse_events_csv(std::istream& in, int sensor_width, int sensor_height);
EventStream parse_events_binary(std::istream& in);

void write_events(const EventStream& stream, const std::string& path, EventFormat format);
void write_events_csv(const EventStream& stream, std::ostream& out);
void write_events_binary(const EventStream& stream, std::ostream& out);

enum class VoxelPolarity { unsigned_count, signed_polarity };

// B x H x W temporal voxel grid over the window [t_start, t_end).
struct VoxelGrid {
    int bins = 0;
    int height = 0;
    int width = 0;
    std::int64_t t_start = 0;
    std::int64_t t_end = 0;
    std::vector<double> data;

    double& at(int b, int y, int x) {
        return data[static_cast<std::size_t>((b * height + y) * width + x)];
    }
    double at(int b, int y, int x) const {
        return data[static_cast<std::size_t>((b * height + y) * width + x)];
    }
    double mass() const;
};

// Deposits each in-window event between its two nearest temporal bin centers
// (bilinear split). Unsigned mode conserves event count exactly.
VoxelGrid to_voxel_grid(const EventStream& stream, std::int64_t t_start, std::int64_t t_end,
                        int bins, int height, int width,
                        VoxelPolarity mode = VoxelPolarity::unsigned_count);

// Per-step summary vectors feeding the slicer:
//   [0] event count normalized by the max per-step count
//   [1] polarity balance in [-1, 1]
//   [2] spatial dispersion in [0, 1]
struct StepFeatures {
    std::vector<std::array<double, 3>> steps;

    int n_steps() const { return static_cast<int>(steps.size()); }
    static constexpr int kDim = 3;
};

StepFeatures micro_bin_features(const EventStream& stream, int n_steps);

// Events with t_a <= t < t_b; the result's window is [t_a, t_b).
EventStream slice_window(const EventStream& stream, std::int64_t t_a, std::int64_t t_b);

// --- synthetic scenes ---------------------------------------------------

struct ObjectSpec {
    double x0 = 0.0;  // center at t = 0
    double y0 = 0.0;
    double w = 0.0;
    double h = 0.0;
    double vx = 0.0;  // px per microsecond
    double vy = 0.0;
    int class_id = 0;
};

struct SyntheticSceneSpec {
    int width = 0;
    int height = 0;
    std::vector<ObjectSpec> objects;
    std::int64_t duration_us = 0;
    double edge_event_rate = 0.0;   // expected events per edge pixel per microsecond
    double noise_rate = 0.0;        // expected noise events per pixel per microsecond
    std::uint64_t seed = 0;
};

struct GroundTruth {
    int width = 0;
    int height = 0;
    std::int64_t t0 = 0;
    std::int64_t duration = 0;
    std::vector<ObjectSpec> objects;

    Box box_at(const ObjectSpec& obj, std::int64_t t) const;
    // (box, class_id) for every object at time t.
    std::vector<std::pair<Box, int>> boxes_at(std::int64_t t) const;
    // H x W binary interior mask of object `index` at time t.
    std::vector<std::uint8_t> mask_at(std::int64_t t, int index) const;
};

std::pair<EventStream, GroundTruth> gen_synthetic(const SyntheticSceneSpec& spec);

std::string scene_spec_to_json(const SyntheticSceneSpec& spec);
SyntheticSceneSpec scene_spec_from_json(const std::string& text);
std::string ground_truth_to_json(const GroundTruth& gt);
GroundTruth ground_truth_from_json(const std::string& text);

}  // namespace evslice
