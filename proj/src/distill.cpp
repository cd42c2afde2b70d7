#include "evslice/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace evslice {

namespace {
using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_map(const FeatureMap& f) {
    if (f.channels < 1 || f.height < 1 || f.width < 1) {
        fail("feature map: dimensions must be >= 1");
    }
    if (f.data.size() != static_cast<std::size_t>(f.channels) * f.height * f.width) {
        fail("feature map: data size does not match dimensions");
    }
    for (double v : f.data) {
        if (!std::isfinite(v)) fail("feature map: nonfinite entry");
    }
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
void write_le(std::ostream& out, T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.write(buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::string& where) {
    char buf[sizeof(T)];
    if (!in.read(buf, sizeof(T))) fail(where + ": truncated");
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
}

// Keeps already-normalized vectors bit-identical across save/load cycles.
std::vector<double> normalize_on_load(std::vector<double> v, const std::string& where) {
    double sq = 0.0;
    for (double x : v) {
        if (!std::isfinite(x)) fail(where + ": nonfinite value");
        sq += x * x;
    }
    if (sq <= 0.0) fail(where + ": zero-norm vector");
    if (std::abs(sq - 1.0) > 1e-12) {
        const double inv = 1.0 / std::sqrt(sq);
        for (double& x : v) x *= inv;
    }
    return v;
}
}  // namespace

std::vector<double> l2_normalize(std::vector<double> v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    if (sq <= 0.0) fail("l2_normalize: zero-norm vector");
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : v) x *= inv;
    return v;
}

double AttentionMap::sum() const {
    return std::accumulate(data.begin(), data.end(), 0.0);
}

std::vector<double> ProjectionHead::apply(const std::vector<double>& v) const {
    if (static_cast<int>(v.size()) != in_dim) {
        fail("projection head: input dimension mismatch");
    }
    std::vector<double> out(static_cast<std::size_t>(out_dim));
    for (int d = 0; d < out_dim; ++d) {
        double s = bias[static_cast<std::size_t>(d)];
        const double* row = weight.data() + static_cast<std::size_t>(d) * in_dim;
        for (int c = 0; c < in_dim; ++c) s += row[c] * v[static_cast<std::size_t>(c)];
        out[static_cast<std::size_t>(d)] = s;
    }
    return out;
}

const std::vector<double>* TeacherEmbeddingBank::find(std::uint64_t id) const {
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == id) return &vectors[i];
    }
    return nullptr;
}

std::vector<double> channel_abs_pool(const FeatureMap& f) {
    check_map(f);
    std::vector<double> pool(static_cast<std::size_t>(f.height) * f.width, 0.0);
    for (int c = 0; c < f.channels; ++c) {
        for (int y = 0; y < f.height; ++y) {
            for (int x = 0; x < f.width; ++x) {
                pool[static_cast<std::size_t>(y) * f.width + x] += std::abs(f.at(c, y, x));
            }
        }
    }
    for (double& v : pool) v /= f.channels;
    return pool;
}

AttentionMap attention_map(const FeatureMap& f, double tau) {
    if (!(tau > 0)) fail("attention_map: tau must be > 0");
    const std::vector<double> pool = channel_abs_pool(f);
    AttentionMap a;
    a.height = f.height;
    a.width = f.width;
    a.temperature = tau;
    a.data.resize(pool.size());

    double mx = -std::numeric_limits<double>::infinity();
    for (double v : pool) mx = std::max(mx, v / tau);
    double z = 0.0;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        a.data[i] = std::exp(pool[i] / tau - mx);
        z += a.data[i];
    }
    for (double& v : a.data) v /= z;
    return a;
}

AttentionMap fuse_attention(const AttentionMap& a, const AttentionMap& b) {
    if (a.height != b.height || a.width != b.width) {
        fail("fuse_attention: shape mismatch");
    }
    AttentionMap out;
    out.height = a.height;
    out.width = a.width;
    out.temperature = a.temperature;
    out.data.resize(a.data.size());
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        out.data[i] = 0.5 * (a.data[i] + b.data[i]);
    }
    return out;
}

namespace {
Roi clip_roi(const Roi& roi, int height, int width, const char* what) {
    const int x0 = std::max(roi.x, 0);
    const int y0 = std::max(roi.y, 0);
    const int x1 = std::min(roi.x + roi.w, width);
    const int y1 = std::min(roi.y + roi.h, height);
    if (x1 <= x0 || y1 <= y0) {
        fail(std::string(what) + ": roi does not intersect the map");
    }
    return Roi{x0, y0, x1 - x0, y1 - y0};
}
}  // namespace

double region_attention_weight(const AttentionMap& a, const Roi& roi) {
    const Roi r = clip_roi(roi, a.height, a.width, "region_attention_weight");
    double mass = 0.0;
    for (int y = r.y; y < r.y + r.h; ++y) {
        for (int x = r.x; x < r.x + r.w; ++x) mass += a.at(y, x);
    }
    return mass * (static_cast<double>(a.height) * a.width) / r.area();
}

std::vector<double> roi_average_pool(const FeatureMap& f, const Roi& roi) {
    check_map(f);
    const Roi r = clip_roi(roi, f.height, f.width, "roi_average_pool");
    std::vector<double> out(static_cast<std::size_t>(f.channels), 0.0);
    for (int c = 0; c < f.channels; ++c) {
        double s = 0.0;
        for (int y = r.y; y < r.y + r.h; ++y) {
            for (int x = r.x; x < r.x + r.w; ++x) s += f.at(c, y, x);
        }
        out[static_cast<std::size_t>(c)] = s / r.area();
    }
    return out;
}

RegionEmbedding region_embed(const FeatureMap& f_evt, const ProjectionHead& head, const Roi& roi) {
    RegionEmbedding e;
    e.roi = roi;
    e.f = l2_normalize(head.apply(roi_average_pool(f_evt, roi)));
    e.unit_norm = true;
    return e;
}

// --- embedding file IO ----------------------------------------------------

TeacherEmbeddingBank load_teacher_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open embedding file: " + path);

    TeacherEmbeddingBank bank;
    bank.source = path;
    char magic[4] = {};
    in.read(magic, 4);
    std::set<std::uint64_t> seen;

    if (in.gcount() == 4 && std::memcmp(magic, "EMB0", 4) == 0) {
        const auto dim = read_le<std::uint32_t>(in, "embedding header");
        const auto count = read_le<std::uint32_t>(in, "embedding header");
        if (dim == 0) fail("embedding file: zero dimension");
        bank.dim = static_cast<int>(dim);
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::string where = "embedding record " + std::to_string(i);
            const auto id = read_le<std::uint64_t>(in, where);
            if (!seen.insert(id).second) fail(where + ": duplicate roi_id " + std::to_string(id));
            std::vector<double> v(dim);
            for (std::uint32_t d = 0; d < dim; ++d) {
                v[d] = static_cast<double>(read_le<float>(in, where));
            }
            bank.ids.push_back(id);
            bank.vectors.push_back(normalize_on_load(std::move(v), where));
        }
        return bank;
    }

    in.clear();
    in.seekg(0);
    std::string tag;
    std::uint32_t dim = 0, count = 0;
    if (!(in >> tag >> dim >> count) || tag != "EMB") {
        fail("embedding file: expected 'EMB <dim> <count>' header");
    }
    if (dim == 0) fail("embedding file: zero dimension");
    bank.dim = static_cast<int>(dim);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string where = "embedding record " + std::to_string(i);
        std::uint64_t id = 0;
        if (!(in >> id)) fail(where + ": missing roi_id");
        if (!seen.insert(id).second) fail(where + ": duplicate roi_id " + std::to_string(id));
        std::vector<double> v(dim);
        for (std::uint32_t d = 0; d < dim; ++d) {
            if (!(in >> v[d])) fail(where + ": dimension inconsistency");
        }
        bank.ids.push_back(id);
        bank.vectors.push_back(normalize_on_load(std::move(v), where));
    }
    return bank;
}

void save_teacher_embeddings(const TeacherEmbeddingBank& bank, const std::string& path,
                             bool binary) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("cannot open output file: " + path);
    if (binary) {
        out.write("EMB0", 4);
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(bank.dim));
        write_le<std::uint32_t>(out, static_cast<std::uint32_t>(bank.size()));
        for (std::size_t i = 0; i < bank.size(); ++i) {
            write_le<std::uint64_t>(out, bank.ids[i]);
            for (double v : bank.vectors[i]) write_le<float>(out, static_cast<float>(v));
        }
        return;
    }
    out << "EMB " << bank.dim << ' ' << bank.size() << '\n';
    char buf[64];
    for (std::size_t i = 0; i < bank.size(); ++i) {
        out << bank.ids[i];
        for (double v : bank.vectors[i]) {
            std::snprintf(buf, sizeof(buf), " %.17g", v);
            out << buf;
        }
        out << '\n';
    }
}

// --- contrastive loss ------------------------------------------------------

namespace {
void check_f2e_inputs(std::size_t n_students, std::size_t n_teachers,
                      const DistillConfig& config) {
    if (n_students != n_teachers) fail("f2e_loss: student/teacher lists not aligned");
    if (!(config.tau_contrast > 0)) fail("f2e_loss: tau_contrast must be > 0");
    const std::size_t min_n = config.denominator_mode == DenominatorMode::paper ? 2 : 1;
    if (n_students < min_n) {
        fail("f2e_loss: needs at least " + std::to_string(min_n) + " regions in this mode");
    }
}

double logsumexp(const std::vector<double>& v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}
}  // namespace

double f2e_loss(const std::vector<std::pair<std::vector<double>, double>>& students,
                const std::vector<std::vector<double>>& teachers, const DistillConfig& config) {
    check_f2e_inputs(students.size(), teachers.size(), config);
    const std::size_t n = students.size();
    const double tau = config.tau_contrast;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& [e, a] = students[i];
        const double pos = a * dot(e, teachers[i]) / tau;
        std::vector<double> den;
        den.reserve(n);
        for (std::size_t j = 0; j < n; ++j) {
            if (config.denominator_mode == DenominatorMode::paper && j == i) continue;
            den.push_back(a * dot(e, teachers[j]) / tau);
        }
        loss += -(pos - logsumexp(den));
    }
    if (!std::isfinite(loss)) throw std::runtime_error("f2e_loss: nonfinite loss");
    return loss;
}

double f2e_loss_regions(const std::vector<StudentRegion>& regions, const ProjectionHead& head,
                        const std::vector<std::vector<double>>& teachers,
                        const DistillConfig& config) {
    std::vector<std::pair<std::vector<double>, double>> students;
    students.reserve(regions.size());
    for (const StudentRegion& r : regions) {
        students.emplace_back(l2_normalize(head.apply(r.pooled)), r.attention);
    }
    return f2e_loss(students, teachers, config);
}

double HeadGradient::norm() const {
    double s = 0.0;
    for (double v : d_weight) s += v * v;
    for (double v : d_bias) s += v * v;
    return std::sqrt(s);
}

HeadGradient grad_f2e(const std::vector<StudentRegion>& regions, const ProjectionHead& head,
                      const std::vector<std::vector<double>>& teachers,
                      const DistillConfig& config) {
    check_f2e_inputs(regions.size(), teachers.size(), config);
    const std::size_t n = regions.size();
    const int d_out = head.out_dim;
    const double tau = config.tau_contrast;

    HeadGradient g;
    g.d_weight.assign(head.weight.size(), 0.0);
    g.d_bias.assign(head.bias.size(), 0.0);

    for (std::size_t i = 0; i < n; ++i) {
        const StudentRegion& r = regions[i];
        const std::vector<double> y = head.apply(r.pooled);
        double ynorm = std::sqrt(dot(y, y));
        if (!(ynorm > 0)) throw std::runtime_error("grad_f2e: zero-norm projected feature");
        std::vector<double> e(y);
        for (double& v : e) v /= ynorm;

        // logits over teachers and the softmax over the denominator set
        std::vector<double> logits(n);
        for (std::size_t j = 0; j < n; ++j) logits[j] = r.attention * dot(e, teachers[j]) / tau;
        std::vector<double> den;
        den.reserve(n);
        for (std::size_t j = 0; j < n; ++j) {
            if (config.denominator_mode == DenominatorMode::paper && j == i) continue;
            den.push_back(logits[j]);
        }
        const double lse = logsumexp(den);

        // dloss_i/dlogit_j = softmax_j (within the denominator set) - [j == i]
        std::vector<double> dl(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (config.denominator_mode == DenominatorMode::paper && j == i) continue;
            dl[j] = std::exp(logits[j] - lse);
        }
        dl[i] -= 1.0;

        std::vector<double> de(static_cast<std::size_t>(d_out), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (dl[j] == 0.0) continue;
            const double c = dl[j] * r.attention / tau;
            for (int d = 0; d < d_out; ++d) {
                de[static_cast<std::size_t>(d)] += c * teachers[j][static_cast<std::size_t>(d)];
            }
        }

        // through the normalization: dy = (de - e * <e, de>) / |y|
        const double proj = dot(e, de);
        for (int d = 0; d < d_out; ++d) {
            const std::size_t di = static_cast<std::size_t>(d);
            const double dy = (de[di] - e[di] * proj) / ynorm;
            g.d_bias[di] += dy;
            double* row = g.d_weight.data() + di * head.in_dim;
            for (int c = 0; c < head.in_dim; ++c) {
                row[c] += dy * r.pooled[static_cast<std::size_t>(c)];
            }
        }
    }
    for (double v : g.d_weight) {
        if (!std::isfinite(v)) throw std::runtime_error("grad_f2e: nonfinite gradient");
    }
    return g;
}

std::pair<ProjectionHead, DistillTrainReport> train_projection(
    ProjectionHead head, const std::vector<StudentRegion>& regions,
    const std::vector<std::vector<double>>& teachers, const DistillConfig& config,
    double lr, int max_iters, double tol) {
    DistillTrainReport report;
    for (int it = 0; it < max_iters; ++it) {
        const double loss = f2e_loss_regions(regions, head, teachers, config);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train_projection: loss diverged at iteration " +
                                     std::to_string(it));
        }
        report.loss_trajectory.push_back(loss);
        report.iterations = it + 1;
        const HeadGradient g = grad_f2e(regions, head, teachers, config);
        if (g.norm() < tol) break;
        for (std::size_t k = 0; k < head.weight.size(); ++k) head.weight[k] -= lr * g.d_weight[k];
        for (std::size_t k = 0; k < head.bias.size(); ++k) head.bias[k] -= lr * g.d_bias[k];
    }
    report.final_loss = report.loss_trajectory.empty() ? 0.0 : report.loss_trajectory.back();
    return {std::move(head), std::move(report)};
}

std::string projection_to_json(const ProjectionHead& head) {
    json j{{"schema_version", 1},
           {"in_dim", head.in_dim},
           {"out_dim", head.out_dim},
           {"weight", head.weight},
           {"bias", head.bias}};
    return j.dump(2);
}

ProjectionHead projection_from_json(const std::string& text) {
    const json j = json::parse(text);
    ProjectionHead head;
    head.in_dim = j.at("in_dim").get<int>();
    head.out_dim = j.at("out_dim").get<int>();
    head.weight = j.at("weight").get<std::vector<double>>();
    head.bias = j.at("bias").get<std::vector<double>>();
    if (head.in_dim < 1 || head.out_dim < 1 ||
        head.weight.size() != static_cast<std::size_t>(head.in_dim) * head.out_dim ||
        head.bias.size() != static_cast<std::size_t>(head.out_dim)) {
        fail("projection head: inconsistent dimensions");
    }
    return head;
}

void save_projection(const ProjectionHead& head, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot open output file: " + path);
    out << projection_to_json(head) << '\n';
}

ProjectionHead load_projection(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open projection head file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return projection_from_json(ss.str());
}

}  // namespace evslice
