#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "evslice/event_core.hpp"
#include "evslice/snn_slicer.hpp"

namespace evslice {

struct SliceTrainingTarget {
    int n_star = 1;      // 1-based target spike step
    double alpha = 0.0;  // margin over the threshold
    double beta = 1.0;   // growth exponent of the incremental constraint
};

// Per-step downstream detection losses L_M(n).
struct FeedbackProfile {
    std::vector<double> l_m;

    int n_steps() const { return static_cast<int>(l_m.size()); }
};

struct LossWeights {
    double w_mem = 1.0;
    double w_lic = 1.0;
    double w_ssf = 1.0;
};

// Which scale the incremental-constraint activation condition compares
// against: the membrane value at the target step (as printed) or the
// threshold (the alternative reading).
enum class LicConditionScale { u_nstar, v_th };

// (U[n*] - (1 + alpha) * v_th)^2
double mem_loss(const std::vector<double>& u, const SliceTrainingTarget& target, double v_th);

// (U[n_c] - v_th * (n_c/n*)^beta)^2 when U[n_c] >= scale * (n_c/n*)^beta, else 0.
double lic_loss(const std::vector<double>& u, int n_c, const SliceTrainingTarget& target,
                double v_th, LicConditionScale scale = LicConditionScale::u_nstar);

// sum_n L_M(n) * |U[n] - v_th|
double ssf_loss(const std::vector<double>& u, const FeedbackProfile& profile, double v_th);

// w_mem * mem + w_lic * sum over realized spike steps n_c < n* + w_ssf * ssf.
double total_loss(const std::vector<double>& u, const std::vector<int>& spike_steps,
                  const SliceTrainingTarget& target, const FeedbackProfile& profile,
                  double v_th, const LossWeights& weights,
                  LicConditionScale scale = LicConditionScale::u_nstar);

struct SlicerGradient {
    std::vector<double> d_w;
    double d_b = 0.0;

    double norm() const;
};

// Analytic gradient of total_loss w.r.t. (w, b) with the given spike steps
// held fixed. U[n] is linear in the parameters, so the chain rule runs
// through dU[n]/dw = sum_{k<=n} leak^(n-k) * features[k].
SlicerGradient grad_total_loss_fixed_spikes(
    const SlicerModel& model, const StepFeatures& features, const LifConfig& config,
    const SliceTrainingTarget& target, const FeedbackProfile& profile,
    const LossWeights& weights, const std::vector<int>& spike_steps,
    LicConditionScale scale = LicConditionScale::u_nstar);

// Same, with spike steps recomputed from the current parameters.
SlicerGradient grad_total_loss(const SlicerModel& model, const StepFeatures& features,
                               const LifConfig& config, const SliceTrainingTarget& target,
                               const FeedbackProfile& profile, const LossWeights& weights,
                               LicConditionScale scale = LicConditionScale::u_nstar);

// Scalar detection loss of a leading segment; the harness supplies this.
using SegmentLossFn = std::function<double(const EventStream& leading_segment)>;

// L_M(n) for each candidate slice step: cut the stream at the end of step n,
// score the leading segment, then normalize the profile to max 1.
FeedbackProfile detection_feedback(const EventStream& stream, const SegmentLossFn& detector,
                                   int n_steps);

struct TrainSample {
    StepFeatures features;
    SliceTrainingTarget target;
    FeedbackProfile profile;
};

struct OptimizerConfig {
    double lr = 0.01;
    int max_iters = 500;
    double tol = 1e-8;
};

struct TrainReport {
    int iterations = 0;
    double final_loss = 0.0;
    std::vector<double> loss_trajectory;
    std::vector<double> grad_norm_trajectory;
    std::vector<std::vector<int>> final_spike_steps;  // per sample

    std::string to_json() const;
};

// Full-batch gradient descent; spike configurations are refreshed between
// steps. Aborts with std::runtime_error if the loss turns nonfinite.
std::pair<SlicerModel, TrainReport> train_slicer(
    SlicerModel model, const std::vector<TrainSample>& dataset, const LifConfig& config,
    const LossWeights& weights, const OptimizerConfig& opt,
    LicConditionScale scale = LicConditionScale::u_nstar);

}  // namespace evslice
