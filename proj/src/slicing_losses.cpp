#include "evslice/slicing_losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace evslice {

namespace {
using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_step(int n, int limit, const char* what) {
    if (n < 1 || n > limit) {
        fail(std::string(what) + " step " + std::to_string(n) + " out of range [1, " +
             std::to_string(limit) + "]");
    }
}

double sgn0(double x) {
    // subgradient 0 at the kink
    if (x > 0) return 1.0;
    if (x < 0) return -1.0;
    return 0.0;
}
}  // namespace

double mem_loss(const std::vector<double>& u, const SliceTrainingTarget& target, double v_th) {
    check_step(target.n_star, static_cast<int>(u.size()), "mem_loss: n*");
    const double d = u[static_cast<std::size_t>(target.n_star - 1)] -
                     (1.0 + target.alpha) * v_th;
    return d * d;
}

double lic_loss(const std::vector<double>& u, int n_c, const SliceTrainingTarget& target,
                double v_th, LicConditionScale scale) {
    const int n = static_cast<int>(u.size());
    check_step(n_c, n, "lic_loss: n_c");
    check_step(target.n_star, n, "lic_loss: n*");
    const double ratio = std::pow(static_cast<double>(n_c) / target.n_star, target.beta);
    const double cond_scale = (scale == LicConditionScale::u_nstar)
                                  ? u[static_cast<std::size_t>(target.n_star - 1)]
                                  : v_th;
    const double u_nc = u[static_cast<std::size_t>(n_c - 1)];
    if (u_nc < cond_scale * ratio) return 0.0;
    const double d = u_nc - v_th * ratio;
    return d * d;
}

double ssf_loss(const std::vector<double>& u, const FeedbackProfile& profile, double v_th) {
    if (profile.l_m.size() != u.size()) {
        fail("ssf_loss: profile length " + std::to_string(profile.l_m.size()) +
             " does not match trace length " + std::to_string(u.size()));
    }
    double total = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) {
        total += profile.l_m[k] * std::abs(u[k] - v_th);
    }
    return total;
}

double total_loss(const std::vector<double>& u, const std::vector<int>& spike_steps,
                  const SliceTrainingTarget& target, const FeedbackProfile& profile,
                  double v_th, const LossWeights& weights, LicConditionScale scale) {
    double loss = 0.0;
    if (weights.w_mem != 0.0) loss += weights.w_mem * mem_loss(u, target, v_th);
    if (weights.w_lic != 0.0) {
        for (int n_c : spike_steps) {
            if (n_c < target.n_star) loss += weights.w_lic * lic_loss(u, n_c, target, v_th, scale);
        }
    }
    if (weights.w_ssf != 0.0) loss += weights.w_ssf * ssf_loss(u, profile, v_th);
    return loss;
}

double SlicerGradient::norm() const {
    double s = d_b * d_b;
    for (double v : d_w) s += v * v;
    return std::sqrt(s);
}

SlicerGradient grad_total_loss_fixed_spikes(
    const SlicerModel& model, const StepFeatures& features, const LifConfig& config,
    const SliceTrainingTarget& target, const FeedbackProfile& profile,
    const LossWeights& weights, const std::vector<int>& spike_steps, LicConditionScale scale) {
    const auto currents = input_current(model, features);
    const LifState st = integrate(currents, config);
    const std::size_t n = st.u.size();
    check_step(target.n_star, static_cast<int>(n), "grad_total_loss: n*");
    if (weights.w_ssf != 0.0 && profile.l_m.size() != n) {
        fail("grad_total_loss: profile length mismatch");
    }

    // dL/dU[n] accumulated per step.
    std::vector<double> du(n, 0.0);
    const std::size_t i_star = static_cast<std::size_t>(target.n_star - 1);
    if (weights.w_mem != 0.0) {
        du[i_star] += weights.w_mem * 2.0 * (st.u[i_star] - (1.0 + target.alpha) * config.v_th);
    }
    if (weights.w_lic != 0.0) {
        for (int n_c : spike_steps) {
            if (n_c >= target.n_star) continue;
            check_step(n_c, static_cast<int>(n), "grad_total_loss: n_c");
            const double ratio = std::pow(static_cast<double>(n_c) / target.n_star, target.beta);
            const double cond_scale = (scale == LicConditionScale::u_nstar)
                                          ? st.u[i_star]
                                          : config.v_th;
            const std::size_t i_c = static_cast<std::size_t>(n_c - 1);
            // The activation condition is treated as a fixed indicator.
            if (st.u[i_c] >= cond_scale * ratio) {
                du[i_c] += weights.w_lic * 2.0 * (st.u[i_c] - config.v_th * ratio);
            }
        }
    }
    if (weights.w_ssf != 0.0) {
        for (std::size_t k = 0; k < n; ++k) {
            du[k] += weights.w_ssf * profile.l_m[k] * sgn0(st.u[k] - config.v_th);
        }
    }

    // dU[n]/dw and dU[n]/db follow the same leaky recurrence as U itself.
    SlicerGradient g;
    g.d_w.assign(model.w.size(), 0.0);
    std::vector<double> gw(model.w.size(), 0.0);
    double gb = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& f = features.steps[k];
        for (std::size_t d = 0; d < gw.size(); ++d) gw[d] = config.leak * gw[d] + f[d];
        gb = config.leak * gb + 1.0;
        if (du[k] != 0.0) {
            for (std::size_t d = 0; d < gw.size(); ++d) g.d_w[d] += du[k] * gw[d];
            g.d_b += du[k] * gb;
        }
    }
    for (double v : g.d_w) {
        if (!std::isfinite(v)) throw std::runtime_error("grad_total_loss: nonfinite gradient");
    }
    if (!std::isfinite(g.d_b)) throw std::runtime_error("grad_total_loss: nonfinite gradient");
    return g;
}

SlicerGradient grad_total_loss(const SlicerModel& model, const StepFeatures& features,
                               const LifConfig& config, const SliceTrainingTarget& target,
                               const FeedbackProfile& profile, const LossWeights& weights,
                               LicConditionScale scale) {
    const LifState st = integrate(input_current(model, features), config);
    return grad_total_loss_fixed_spikes(model, features, config, target, profile, weights,
                                        st.spike_steps(), scale);
}

FeedbackProfile detection_feedback(const EventStream& stream, const SegmentLossFn& detector,
                                   int n_steps) {
    if (n_steps < 2) fail("detection_feedback: n_steps must be >= 2");
    if (stream.span <= 0) fail("detection_feedback: stream window is empty");
    FeedbackProfile profile;
    profile.l_m.reserve(static_cast<std::size_t>(n_steps));
    for (int n = 1; n <= n_steps; ++n) {
        const std::int64_t cut = stream.t0 + static_cast<std::int64_t>(std::llround(
            static_cast<double>(stream.span) * n / n_steps));
        const EventStream leading = slice_window(stream, stream.t0, std::max(cut, stream.t0 + 1));
        double loss;
        try {
            loss = detector(leading);
        } catch (const std::exception& e) {
            throw std::runtime_error("detection_feedback: detector failed at step " +
                                     std::to_string(n) + ": " + e.what());
        }
        if (!std::isfinite(loss) || loss < 0) {
            throw std::runtime_error("detection_feedback: detector returned invalid loss at step " +
                                     std::to_string(n));
        }
        profile.l_m.push_back(loss);
    }
    const double mx = *std::max_element(profile.l_m.begin(), profile.l_m.end());
    if (mx > 0) {
        for (double& v : profile.l_m) v /= mx;
    }
    return profile;
}

std::string TrainReport::to_json() const {
    json j{{"schema_version", 1},
           {"iterations", iterations},
           {"final_loss", final_loss},
           {"loss_trajectory", loss_trajectory},
           {"grad_norm_trajectory", grad_norm_trajectory},
           {"final_spike_steps", final_spike_steps}};
    return j.dump(2);
}

std::pair<SlicerModel, TrainReport> train_slicer(
    SlicerModel model, const std::vector<TrainSample>& dataset, const LifConfig& config,
    const LossWeights& weights, const OptimizerConfig& opt, LicConditionScale scale) {
    if (dataset.empty()) fail("train_slicer: empty dataset");
    if (weights.w_mem < 0 || weights.w_lic < 0 || weights.w_ssf < 0 ||
        (weights.w_mem == 0 && weights.w_lic == 0 && weights.w_ssf == 0)) {
        fail("train_slicer: loss weights must be nonnegative with at least one positive");
    }

    TrainReport report;
    auto batch_eval = [&](const SlicerModel& m) {
        double loss = 0.0;
        SlicerGradient grad;
        grad.d_w.assign(m.w.size(), 0.0);
        for (const TrainSample& sample : dataset) {
            const LifState st = integrate(input_current(m, sample.features), config);
            const auto spikes = st.spike_steps();
            loss += total_loss(st.u, spikes, sample.target, sample.profile, config.v_th,
                               weights, scale);
            const SlicerGradient g = grad_total_loss_fixed_spikes(
                m, sample.features, config, sample.target, sample.profile, weights, spikes,
                scale);
            for (std::size_t d = 0; d < grad.d_w.size(); ++d) grad.d_w[d] += g.d_w[d];
            grad.d_b += g.d_b;
        }
        return std::make_pair(loss, grad);
    };

    for (int it = 0; it < opt.max_iters; ++it) {
        auto [loss, grad] = batch_eval(model);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train_slicer: loss diverged at iteration " +
                                     std::to_string(it));
        }
        const double gnorm = grad.norm();
        report.loss_trajectory.push_back(loss);
        report.grad_norm_trajectory.push_back(gnorm);
        report.iterations = it + 1;
        if (gnorm < opt.tol) break;

        // Backtracking: halve the step until the batch loss (with spikes
        // refreshed) actually drops. Keeps the trajectory monotone even when
        // the quadratic terms are steep or a spike flips under the step.
        double step = opt.lr;
        bool accepted = false;
        for (int tries = 0; tries < 40; ++tries) {
            SlicerModel candidate = model;
            for (std::size_t d = 0; d < candidate.w.size(); ++d) {
                candidate.w[d] -= step * grad.d_w[d];
            }
            candidate.b -= step * grad.d_b;
            const double cand_loss = batch_eval(candidate).first;
            if (std::isfinite(cand_loss) && cand_loss < loss) {
                model = std::move(candidate);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // no descent direction left at this point
    }

    report.final_loss = report.loss_trajectory.empty() ? 0.0 : report.loss_trajectory.back();
    for (const TrainSample& sample : dataset) {
        const LifState st = integrate(input_current(model, sample.features), config);
        report.final_spike_steps.push_back(st.spike_steps());
    }
    return {std::move(model), std::move(report)};
}

}  // namespace evslice
