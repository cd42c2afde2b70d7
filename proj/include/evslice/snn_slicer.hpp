#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evslice/event_core.hpp"

namespace evslice {

enum class ResetMode { hard, soft };

struct LifConfig {
    double v_th = 1.0;
    double leak = 0.9;  // decay factor in (0, 1]
    ResetMode reset_mode = ResetMode::hard;
    double surrogate_width = 1.0;
    // Whether the neuron keeps integrating and may spike again within one
    // processing window after its first spike.
    bool rearm = true;
};

// The learnable part: maps a step feature vector to a scalar input current.
struct SlicerModel {
    std::vector<double> w = std::vector<double>(StepFeatures::kDim, 0.0);
    double b = 0.0;
};

// Membrane traces over steps 1..N (index i holds step i+1).
// u is never reset; v carries the spiking dynamics.
struct LifState {
    std::vector<double> u;
    std::vector<double> v;
    std::vector<int> s;

    int n_steps() const { return static_cast<int>(u.size()); }
    // 1-based steps at which a spike fired.
    std::vector<int> spike_steps() const;
};

struct SliceResult {
    std::vector<int> spike_steps;  // 1-based
    std::vector<std::pair<std::int64_t, std::int64_t>> segments;
};

std::vector<double> input_current(const SlicerModel& model, const StepFeatures& features);

// Discrete LIF recurrence:
//   H[n] = leak * V[n-1] + I[n],  S[n] = 1 iff H[n] >= v_th
//   hard reset: V[n] = H[n] * (1 - S[n]);  soft reset: V[n] = H[n] - v_th * S[n]
//   U[n] = leak * U[n-1] + I[n]  (no reset)
LifState integrate(const std::vector<double>& currents, const LifConfig& config);

// Segments induced by the spike train over the stream's step grid. Boundaries
// land at step ends; the trailing remainder closes the last segment.
SliceResult slice_points(const LifState& state, const EventStream& stream);

// Rectangular surrogate for the Heaviside derivative at the threshold.
double surrogate_spike_grad(double u, const LifConfig& config);

std::string slicer_to_json(const SlicerModel& model, const LifConfig& config);
std::pair<SlicerModel, LifConfig> slicer_from_json(const std::string& text);
void save_slicer(const SlicerModel& model, const LifConfig& config, const std::string& path);
std::pair<SlicerModel, LifConfig> load_slicer(const std::string& path);

}  // namespace evslice
