#include "evslice/event_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace evslice {

namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_sensor(int width, int height) {
    if (width <= 0 || height <= 0) {
        fail("sensor size must be positive, got " + std::to_string(width) + "x" +
             std::to_string(height));
    }
}

int map_polarity(long long raw, const std::string& where) {
    // Accept both {-1,+1} and {0,1} encodings.
    if (raw == 1) return 1;
    if (raw == -1 || raw == 0) return -1;
    fail(where + ": polarity must be in {-1,+1} or {0,1}, got " + std::to_string(raw));
}

void finalize_stream(EventStream& s) {
    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    s.t0 = 0;
    s.span = s.events.empty() ? 0 : s.events.back().t + 1;
    validate(s);
}

template <typename T>
void write_le(std::ostream& out, T value) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& where) {
    unsigned char buf[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) {
        fail(where + ": truncated record");
    }
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

}  // namespace

void validate(const EventStream& s) {
    check_sensor(s.width, s.height);
    if (s.span < 0) fail("stream span must be nonnegative");
    std::int64_t prev = s.t0;
    for (std::size_t i = 0; i < s.events.size(); ++i) {
        const Event& e = s.events[i];
        if (e.x < 0 || e.x >= s.width || e.y < 0 || e.y >= s.height) {
            fail("event " + std::to_string(i) + ": coordinates (" + std::to_string(e.x) +
                 "," + std::to_string(e.y) + ") out of sensor bounds");
        }
        if (e.p != -1 && e.p != 1) {
            fail("event " + std::to_string(i) + ": polarity must be -1 or +1");
        }
        if (e.t < prev) fail("event " + std::to_string(i) + ": timestamps not sorted");
        if (e.t < s.t0 || e.t > s.t0 + s.span) {
            fail("event " + std::to_string(i) + ": timestamp outside stream window");
        }
        prev = e.t;
    }
}

EventStream parse_events_csv(std::istream& in, int sensor_width, int sensor_height) {
    check_sensor(sensor_width, sensor_height);
    std::string line;
    if (!std::getline(in, line)) fail("csv: missing header line");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "x,y,t,p") fail("csv: expected header 'x,y,t,p', got '" + line + "'");

    EventStream s;
    s.width = sensor_width;
    s.height = sensor_height;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::string where = "csv line " + std::to_string(lineno);
        long long vals[4];
        std::size_t pos = 0;
        for (int k = 0; k < 4; ++k) {
            std::size_t comma = (k < 3) ? line.find(',', pos) : line.size();
            if (k < 3 && comma == std::string::npos) fail(where + ": expected 4 fields");
            try {
                std::size_t used = 0;
                vals[k] = std::stoll(line.substr(pos, comma - pos), &used);
                if (used != comma - pos) fail(where + ": trailing junk in field");
            } catch (const std::invalid_argument&) {
                fail(where + ": non-numeric field");
            } catch (const std::out_of_range&) {
                fail(where + ": field out of range");
            }
            pos = comma + 1;
        }
        Event e;
        e.x = static_cast<int>(vals[0]);
        e.y = static_cast<int>(vals[1]);
        e.t = vals[2];
        e.p = map_polarity(vals[3], where);
        if (e.t < 0) fail(where + ": negative timestamp");
        if (e.x < 0 || e.x >= sensor_width || e.y < 0 || e.y >= sensor_height) {
            fail(where + ": coordinates out of sensor bounds");
        }
        s.events.push_back(e);
    }
    finalize_stream(s);
    return s;
}

EventStream parse_events_binary(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "EVT0", 4) != 0) {
        fail("binary: bad magic, expected 'EVT0'");
    }
    const auto width = read_le<std::uint16_t>(in, "binary header");
    const auto height = read_le<std::uint16_t>(in, "binary header");
    const auto count = read_le<std::uint64_t>(in, "binary header");
    check_sensor(width, height);

    EventStream s;
    s.width = width;
    s.height = height;
    s.events.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string where = "binary record " + std::to_string(i) +
                                  " (offset " + std::to_string(16 + i * 13) + ")";
        Event e;
        e.x = read_le<std::uint16_t>(in, where);
        e.y = read_le<std::uint16_t>(in, where);
        const auto t = read_le<std::uint64_t>(in, where);
        e.t = static_cast<std::int64_t>(t);
        e.p = map_polarity(read_le<std::int8_t>(in, where), where);
        if (e.x >= width || e.y >= height) fail(where + ": coordinates out of sensor bounds");
        s.events.push_back(e);
    }
    finalize_stream(s);
    return s;
}

EventStream parse_events(const std::string& path, EventFormat format,
                         int sensor_width, int sensor_height) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open event file: " + path);
    return format == EventFormat::csv ? parse_events_csv(in, sensor_width, sensor_height)
                                      : parse_events_binary(in);
}

void write_events_csv(const EventStream& s, std::ostream& out) {
    out << "x,y,t,p\n";
    for (const Event& e : s.events) {
        out << e.x << ',' << e.y << ',' << e.t << ',' << e.p << '\n';
    }
}

void write_events_binary(const EventStream& s, std::ostream& out) {
    out.write("EVT0", 4);
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.width));
    write_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.height));
    write_le<std::uint64_t>(out, s.events.size());
    for (const Event& e : s.events) {
        write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.x));
        write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.y));
        write_le<std::uint64_t>(out, static_cast<std::uint64_t>(e.t));
        write_le<std::int8_t>(out, static_cast<std::int8_t>(e.p));
    }
}

void write_events(const EventStream& s, const std::string& path, EventFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("cannot open output file: " + path);
    if (format == EventFormat::csv) {
        write_events_csv(s, out);
    } else {
        write_events_binary(s, out);
    }
}

double VoxelGrid::mass() const {
    return std::accumulate(data.begin(), data.end(), 0.0);
}

VoxelGrid to_voxel_grid(const EventStream& s, std::int64_t t_start, std::int64_t t_end,
                        int bins, int height, int width, VoxelPolarity mode) {
    if (t_start >= t_end) fail("voxel grid: window must have positive length");
    if (bins < 1 || height < 1 || width < 1) fail("voxel grid: bins/height/width must be >= 1");

    VoxelGrid g;
    g.bins = bins;
    g.height = height;
    g.width = width;
    g.t_start = t_start;
    g.t_end = t_end;
    g.data.assign(static_cast<std::size_t>(bins) * height * width, 0.0);

    const double window = static_cast<double>(t_end - t_start);
    for (const Event& e : s.events) {
        if (e.t < t_start || e.t >= t_end) continue;
        if (e.x >= width || e.y >= height) continue;
        const double weight = (mode == VoxelPolarity::signed_polarity) ? e.p : 1.0;
        if (bins == 1) {
            g.at(0, e.y, e.x) += weight;
            continue;
        }
        // Bin k's center sits at normalized time k / (bins - 1).
        const double q = (static_cast<double>(e.t - t_start) / window) * (bins - 1);
        const int lo = static_cast<int>(std::floor(q));
        const double frac = q - lo;
        g.at(lo, e.y, e.x) += weight * (1.0 - frac);
        if (lo + 1 < bins) g.at(lo + 1, e.y, e.x) += weight * frac;
    }
    return g;
}

StepFeatures micro_bin_features(const EventStream& s, int n_steps) {
    if (n_steps < 2) fail("micro_bin_features: n_steps must be >= 2");
    if (s.span <= 0) fail("micro_bin_features: stream window is empty");

    struct Accum {
        std::int64_t count = 0;
        std::int64_t pos = 0;
        double sx = 0, sy = 0, sxx = 0, syy = 0;
    };
    std::vector<Accum> acc(static_cast<std::size_t>(n_steps));
    const double step_len = static_cast<double>(s.span) / n_steps;
    for (const Event& e : s.events) {
        if (e.t < s.t0 || e.t >= s.t_end()) continue;
        int k = static_cast<int>(static_cast<double>(e.t - s.t0) / step_len);
        k = std::min(k, n_steps - 1);
        Accum& a = acc[static_cast<std::size_t>(k)];
        ++a.count;
        if (e.p > 0) ++a.pos;
        a.sx += e.x;
        a.sy += e.y;
        a.sxx += static_cast<double>(e.x) * e.x;
        a.syy += static_cast<double>(e.y) * e.y;
    }

    std::int64_t max_count = 0;
    for (const Accum& a : acc) max_count = std::max(max_count, a.count);

    StepFeatures f;
    f.steps.resize(static_cast<std::size_t>(n_steps));
    for (int k = 0; k < n_steps; ++k) {
        const Accum& a = acc[static_cast<std::size_t>(k)];
        auto& v = f.steps[static_cast<std::size_t>(k)];
        if (a.count == 0) {
            v = {0.0, 0.0, 0.0};
            continue;
        }
        const double n = static_cast<double>(a.count);
        v[0] = max_count > 0 ? n / static_cast<double>(max_count) : 0.0;
        v[1] = (2.0 * a.pos - n) / n;
        const double var_x = std::max(0.0, a.sxx / n - (a.sx / n) * (a.sx / n));
        const double var_y = std::max(0.0, a.syy / n - (a.sy / n) * (a.sy / n));
        const double disp = (std::sqrt(var_x) + std::sqrt(var_y)) /
                            ((s.width + s.height) / 2.0);
        v[2] = std::clamp(disp, 0.0, 1.0);
    }
    return f;
}

EventStream slice_window(const EventStream& s, std::int64_t t_a, std::int64_t t_b) {
    if (t_a < s.t0 || t_b > s.t_end() || t_a >= t_b) {
        fail("slice_window: bounds [" + std::to_string(t_a) + "," + std::to_string(t_b) +
             ") invalid for window [" + std::to_string(s.t0) + "," +
             std::to_string(s.t_end()) + ")");
    }
    EventStream out;
    out.width = s.width;
    out.height = s.height;
    out.t0 = t_a;
    out.span = t_b - t_a;
    auto lo = std::lower_bound(s.events.begin(), s.events.end(), t_a,
                               [](const Event& e, std::int64_t t) { return e.t < t; });
    auto hi = std::lower_bound(lo, s.events.end(), t_b,
                               [](const Event& e, std::int64_t t) { return e.t < t; });
    out.events.assign(lo, hi);
    return out;
}

// --- synthetic scenes ---------------------------------------------------

Box GroundTruth::box_at(const ObjectSpec& obj, std::int64_t t) const {
    const double dt = static_cast<double>(t - t0);
    return Box{obj.x0 + obj.vx * dt, obj.y0 + obj.vy * dt, obj.w, obj.h};
}

std::vector<std::pair<Box, int>> GroundTruth::boxes_at(std::int64_t t) const {
    std::vector<std::pair<Box, int>> out;
    out.reserve(objects.size());
    for (const ObjectSpec& obj : objects) out.emplace_back(box_at(obj, t), obj.class_id);
    return out;
}

std::vector<std::uint8_t> GroundTruth::mask_at(std::int64_t t, int index) const {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(width) * height, 0);
    const Box b = box_at(objects.at(static_cast<std::size_t>(index)), t);
    const int x0 = std::max(0, static_cast<int>(std::lround(b.left())));
    const int x1 = std::min(width - 1, static_cast<int>(std::lround(b.right())) - 1);
    const int y0 = std::max(0, static_cast<int>(std::lround(b.top())));
    const int y1 = std::min(height - 1, static_cast<int>(std::lround(b.bottom())) - 1);
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            mask[static_cast<std::size_t>(y) * width + x] = 1;
        }
    }
    return mask;
}

namespace {

// Integer perimeter cells of a box, clipped to the sensor.
std::vector<std::pair<int, int>> edge_pixels(const Box& b, int width, int height) {
    const int x0 = static_cast<int>(std::lround(b.left()));
    const int y0 = static_cast<int>(std::lround(b.top()));
    const int x1 = x0 + static_cast<int>(std::lround(b.w)) - 1;
    const int y1 = y0 + static_cast<int>(std::lround(b.h)) - 1;
    std::vector<std::pair<int, int>> px;
    auto push = [&](int x, int y) {
        if (x >= 0 && x < width && y >= 0 && y < height) px.emplace_back(x, y);
    };
    for (int x = x0; x <= x1; ++x) {
        push(x, y0);
        if (y1 != y0) push(x, y1);
    }
    for (int y = y0 + 1; y < y1; ++y) {
        push(x0, y);
        if (x1 != x0) push(x1, y);
    }
    return px;
}

}  // namespace

std::pair<EventStream, GroundTruth> gen_synthetic(const SyntheticSceneSpec& spec) {
    check_sensor(spec.width, spec.height);
    if (spec.duration_us <= 0) fail("gen_synthetic: duration must be positive");
    for (const ObjectSpec& obj : spec.objects) {
        if (obj.w <= 0 || obj.h <= 0) fail("gen_synthetic: object extents must be positive");
        if (obj.w > spec.width || obj.h > spec.height) {
            fail("gen_synthetic: object larger than sensor");
        }
    }
    if (spec.edge_event_rate < 0 || spec.noise_rate < 0) {
        fail("gen_synthetic: rates must be nonnegative");
    }

    GroundTruth gt;
    gt.width = spec.width;
    gt.height = spec.height;
    gt.t0 = 0;
    gt.duration = spec.duration_us;
    gt.objects = spec.objects;

    std::mt19937_64 rng(spec.seed);
    EventStream s;
    s.width = spec.width;
    s.height = spec.height;

    const std::int64_t frame_len = std::max<std::int64_t>(1, spec.duration_us / 200);
    for (std::int64_t f0 = 0; f0 < spec.duration_us; f0 += frame_len) {
        const std::int64_t f1 = std::min(f0 + frame_len, spec.duration_us);
        const std::int64_t mid = (f0 + f1) / 2;
        const double len = static_cast<double>(f1 - f0);
        std::uniform_int_distribution<std::int64_t> t_dist(f0, f1 - 1);
        std::uniform_int_distribution<int> p_dist(0, 1);

        for (const ObjectSpec& obj : spec.objects) {
            const Box b = gt.box_at(obj, mid);
            std::poisson_distribution<int> n_dist(spec.edge_event_rate * len);
            for (const auto& [px, py] : edge_pixels(b, spec.width, spec.height)) {
                const int n = n_dist(rng);
                for (int i = 0; i < n; ++i) {
                    s.events.push_back(Event{px, py, t_dist(rng), p_dist(rng) ? 1 : -1});
                }
            }
        }
        if (spec.noise_rate > 0) {
            std::poisson_distribution<long long> n_dist(
                spec.noise_rate * spec.width * spec.height * len);
            std::uniform_int_distribution<int> x_dist(0, spec.width - 1);
            std::uniform_int_distribution<int> y_dist(0, spec.height - 1);
            const long long n = n_dist(rng);
            for (long long i = 0; i < n; ++i) {
                s.events.push_back(
                    Event{x_dist(rng), y_dist(rng), t_dist(rng), p_dist(rng) ? 1 : -1});
            }
        }
    }

    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    s.t0 = 0;
    s.span = spec.duration_us;
    validate(s);
    return {std::move(s), std::move(gt)};
}

std::string scene_spec_to_json(const SyntheticSceneSpec& spec) {
    json objs = json::array();
    for (const ObjectSpec& o : spec.objects) {
        objs.push_back({{"x0", o.x0}, {"y0", o.y0}, {"w", o.w}, {"h", o.h},
                        {"vx", o.vx}, {"vy", o.vy}, {"class_id", o.class_id}});
    }
    json j{{"schema_version", 1},
           {"width", spec.width},
           {"height", spec.height},
           {"objects", objs},
           {"duration_us", spec.duration_us},
           {"edge_event_rate", spec.edge_event_rate},
           {"noise_rate", spec.noise_rate},
           {"seed", spec.seed}};
    return j.dump(2);
}

SyntheticSceneSpec scene_spec_from_json(const std::string& text) {
    const json j = json::parse(text);
    SyntheticSceneSpec spec;
    spec.width = j.at("width").get<int>();
    spec.height = j.at("height").get<int>();
    spec.duration_us = j.at("duration_us").get<std::int64_t>();
    spec.edge_event_rate = j.at("edge_event_rate").get<double>();
    spec.noise_rate = j.at("noise_rate").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    for (const json& o : j.at("objects")) {
        ObjectSpec obj;
        obj.x0 = o.at("x0").get<double>();
        obj.y0 = o.at("y0").get<double>();
        obj.w = o.at("w").get<double>();
        obj.h = o.at("h").get<double>();
        obj.vx = o.value("vx", 0.0);
        obj.vy = o.value("vy", 0.0);
        obj.class_id = o.at("class_id").get<int>();
        spec.objects.push_back(obj);
    }
    return spec;
}

std::string ground_truth_to_json(const GroundTruth& gt) {
    json objs = json::array();
    for (const ObjectSpec& o : gt.objects) {
        objs.push_back({{"x0", o.x0}, {"y0", o.y0}, {"w", o.w}, {"h", o.h},
                        {"vx", o.vx}, {"vy", o.vy}, {"class_id", o.class_id}});
    }
    json j{{"schema_version", 1},
           {"width", gt.width},
           {"height", gt.height},
           {"t0", gt.t0},
           {"duration", gt.duration},
           {"objects", objs}};
    return j.dump(2);
}

GroundTruth ground_truth_from_json(const std::string& text) {
    const json j = json::parse(text);
    GroundTruth gt;
    gt.width = j.at("width").get<int>();
    gt.height = j.at("height").get<int>();
    gt.t0 = j.at("t0").get<std::int64_t>();
    gt.duration = j.at("duration").get<std::int64_t>();
    for (const json& o : j.at("objects")) {
        ObjectSpec obj;
        obj.x0 = o.at("x0").get<double>();
        obj.y0 = o.at("y0").get<double>();
        obj.w = o.at("w").get<double>();
        obj.h = o.at("h").get<double>();
        obj.vx = o.value("vx", 0.0);
        obj.vy = o.value("vy", 0.0);
        obj.class_id = o.at("class_id").get<int>();
        gt.objects.push_back(obj);
    }
    return gt;
}

}  // namespace evslice
