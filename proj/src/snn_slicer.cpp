#include "evslice/snn_slicer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace evslice {

namespace {
using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_config(const LifConfig& c) {
    if (!(c.v_th > 0)) fail("lif: v_th must be > 0");
    if (!(c.leak > 0) || c.leak > 1) fail("lif: leak must be in (0, 1]");
    if (!(c.surrogate_width > 0)) fail("lif: surrogate_width must be > 0");
}
}  // namespace

std::vector<int> LifState::spike_steps() const {
    std::vector<int> steps;
    for (int i = 0; i < n_steps(); ++i) {
        if (s[static_cast<std::size_t>(i)]) steps.push_back(i + 1);
    }
    return steps;
}

std::vector<double> input_current(const SlicerModel& model, const StepFeatures& features) {
    if (model.w.size() != StepFeatures::kDim) {
        fail("input_current: model dimension " + std::to_string(model.w.size()) +
             " does not match feature dimension " + std::to_string(StepFeatures::kDim));
    }
    std::vector<double> currents;
    currents.reserve(features.steps.size());
    for (const auto& f : features.steps) {
        double i = model.b;
        for (std::size_t d = 0; d < f.size(); ++d) i += model.w[d] * f[d];
        currents.push_back(i);
    }
    return currents;
}

LifState integrate(const std::vector<double>& currents, const LifConfig& config) {
    check_config(config);
    for (double i : currents) {
        if (!std::isfinite(i)) fail("integrate: nonfinite input current");
    }
    LifState st;
    const std::size_t n = currents.size();
    st.u.resize(n);
    st.v.resize(n);
    st.s.resize(n);
    double u = 0.0, v = 0.0;
    bool armed = true;
    for (std::size_t k = 0; k < n; ++k) {
        u = config.leak * u + currents[k];
        const double h = config.leak * v + currents[k];
        const bool spike = armed && h >= config.v_th;
        if (spike) {
            v = (config.reset_mode == ResetMode::hard) ? 0.0 : h - config.v_th;
            if (!config.rearm) armed = false;
        } else {
            v = h;
        }
        st.u[k] = u;
        st.v[k] = v;
        st.s[k] = spike ? 1 : 0;
    }
    return st;
}

SliceResult slice_points(const LifState& state, const EventStream& stream) {
    const int n = state.n_steps();
    if (n < 1) fail("slice_points: empty state");
    if (stream.span <= 0) fail("slice_points: stream window is empty");

    SliceResult r;
    r.spike_steps = state.spike_steps();
    std::int64_t prev = stream.t0;
    for (int step : r.spike_steps) {
        // Boundary at the end of step `step` on the uniform step grid.
        const std::int64_t t = stream.t0 +
            static_cast<std::int64_t>(std::llround(
                static_cast<double>(stream.span) * step / n));
        if (t > prev) {
            r.segments.emplace_back(prev, t);
            prev = t;
        }
    }
    if (prev < stream.t_end()) r.segments.emplace_back(prev, stream.t_end());
    return r;
}

double surrogate_spike_grad(double u, const LifConfig& config) {
    check_config(config);
    const double w = config.surrogate_width;
    return std::abs(u - config.v_th) <= w / 2.0 ? 1.0 / w : 0.0;
}

std::string slicer_to_json(const SlicerModel& model, const LifConfig& config) {
    json j{{"schema_version", 1},
           {"lif",
            {{"v_th", config.v_th},
             {"leak", config.leak},
             {"reset_mode", config.reset_mode == ResetMode::hard ? "hard" : "soft"},
             {"surrogate_width", config.surrogate_width},
             {"rearm", config.rearm}}},
           {"model", {{"w", model.w}, {"b", model.b}}}};
    return j.dump(2);
}

std::pair<SlicerModel, LifConfig> slicer_from_json(const std::string& text) {
    const json j = json::parse(text);
    LifConfig c;
    const json& lif = j.at("lif");
    c.v_th = lif.at("v_th").get<double>();
    c.leak = lif.at("leak").get<double>();
    const std::string mode = lif.at("reset_mode").get<std::string>();
    if (mode == "hard") {
        c.reset_mode = ResetMode::hard;
    } else if (mode == "soft") {
        c.reset_mode = ResetMode::soft;
    } else {
        fail("slicer model: unknown reset_mode '" + mode + "'");
    }
    c.surrogate_width = lif.at("surrogate_width").get<double>();
    c.rearm = lif.value("rearm", true);
    check_config(c);

    SlicerModel m;
    m.w = j.at("model").at("w").get<std::vector<double>>();
    m.b = j.at("model").at("b").get<double>();
    for (double v : m.w) {
        if (!std::isfinite(v)) fail("slicer model: nonfinite weight");
    }
    if (!std::isfinite(m.b)) fail("slicer model: nonfinite bias");
    return {m, c};
}

void save_slicer(const SlicerModel& model, const LifConfig& config, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot open output file: " + path);
    out << slicer_to_json(model, config) << '\n';
}

std::pair<SlicerModel, LifConfig> load_slicer(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open slicer model file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return slicer_from_json(ss.str());
}

}  // namespace evslice
