#include "evslice/ovd_head.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace evslice {

namespace {
using json = nlohmann::json;

constexpr double kMaskEps = 1e-7;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// All category vectors in declared order: e_bg, base..., then novel when asked.
std::vector<const std::vector<double>*> bank_order(const TextEmbeddingBank& bank,
                                                   bool include_novel) {
    std::vector<const std::vector<double>*> order;
    order.push_back(&bank.e_bg);
    for (const auto& t : bank.base) order.push_back(&t);
    if (include_novel) {
        for (const auto& t : bank.novel) order.push_back(&t);
    }
    return order;
}

std::vector<double> softmax_scaled(const std::vector<double>& z, double tau) {
    std::vector<double> q(z.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z) mx = std::max(mx, v / tau);
    double sum = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
        q[k] = std::exp(z[k] / tau - mx);
        sum += q[k];
    }
    for (double& v : q) v /= sum;
    return q;
}
}  // namespace

double smooth_l1(double d) {
    const double a = std::abs(d);
    return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double ca_box_loss(const std::vector<Box>& pred, const std::vector<Box>& gt,
                   const std::vector<int>& labels) {
    if (pred.size() != gt.size() || pred.size() != labels.size()) {
        fail("ca_box_loss: pred/gt/labels length mismatch");
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (labels[i] <= 0) continue;
        loss += smooth_l1(pred[i].x - gt[i].x);
        loss += smooth_l1(pred[i].y - gt[i].y);
        loss += smooth_l1(pred[i].w - gt[i].w);
        loss += smooth_l1(pred[i].h - gt[i].h);
    }
    return loss;
}

double ca_mask_loss(const std::vector<MaskGrid>& pred, const std::vector<MaskGrid>& gt,
                    bool mean_mode) {
    if (pred.size() != gt.size()) fail("ca_mask_loss: pred/gt length mismatch");
    double loss = 0.0;
    std::size_t pixels = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const MaskGrid& p = pred[i];
        const MaskGrid& g = gt[i];
        if (p.height != g.height || p.width != g.width ||
            p.data.size() != g.data.size()) {
            fail("ca_mask_loss: mask " + std::to_string(i) + " shape mismatch");
        }
        for (std::size_t k = 0; k < p.data.size(); ++k) {
            const double t = g.data[k];
            if (t != 0.0 && t != 1.0) {
                fail("ca_mask_loss: ground-truth mask " + std::to_string(i) + " is not binary");
            }
            const double m = std::clamp(p.data[k], kMaskEps, 1.0 - kMaskEps);
            loss -= t * std::log(m) + (1.0 - t) * std::log(1.0 - m);
        }
        pixels += p.data.size();
    }
    if (mean_mode && pixels > 0) loss /= static_cast<double>(pixels);
    return loss;
}

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) fail("cosine_sim: dimension mismatch");
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na <= 0 || nb <= 0) fail("cosine_sim: zero-norm embedding");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s / (na * nb);
}

ClassLogits class_logits(const std::vector<double>& e_r, const TextEmbeddingBank& bank,
                         bool include_novel) {
    ClassLogits out;
    for (const auto* t : bank_order(bank, include_novel)) {
        out.z.push_back(cosine_sim(e_r, *t));
    }
    return out;
}

double text_loss(const std::vector<LabeledProposal>& proposals, const TextEmbeddingBank& bank,
                 double tau) {
    if (proposals.empty()) fail("text_loss: needs at least one proposal");
    if (!(tau > 0)) fail("text_loss: tau must be > 0");
    double loss = 0.0;
    for (const LabeledProposal& p : proposals) {
        if (p.label < 0 || p.label > bank.n_base()) {
            fail("text_loss: label " + std::to_string(p.label) + " outside background+base");
        }
        const ClassLogits z = class_logits(p.embedding, bank, /*include_novel=*/false);
        const std::vector<double> q = softmax_scaled(z.z, tau);
        loss -= std::log(std::max(q[static_cast<std::size_t>(p.label)], 1e-300));
    }
    return loss / static_cast<double>(proposals.size());
}

std::vector<double> grad_text_loss_ebg(const std::vector<LabeledProposal>& proposals,
                                       const TextEmbeddingBank& bank, double tau) {
    if (proposals.empty()) fail("grad_text_loss_ebg: needs at least one proposal");
    if (!(tau > 0)) fail("grad_text_loss_ebg: tau must be > 0");
    const std::size_t dim = bank.e_bg.size();
    std::vector<double> grad(dim, 0.0);
    const double nb = norm2(bank.e_bg);
    if (nb <= 0) fail("grad_text_loss_ebg: zero-norm e_bg");

    for (const LabeledProposal& p : proposals) {
        const ClassLogits z = class_logits(p.embedding, bank, /*include_novel=*/false);
        const std::vector<double> q = softmax_scaled(z.z, tau);
        const double dz0 = (q[0] - (p.label == 0 ? 1.0 : 0.0)) / tau;
        // d cos(e_r, e_bg) / d e_bg
        const double nr = norm2(p.embedding);
        for (std::size_t d = 0; d < dim; ++d) {
            const double dcos = p.embedding[d] / (nr * nb) - z.z[0] * bank.e_bg[d] / (nb * nb);
            grad[d] += dz0 * dcos;
        }
    }
    for (double& v : grad) v /= static_cast<double>(proposals.size());
    return grad;
}

Classification classify(const std::vector<double>& e_r, const TextEmbeddingBank& bank,
                        double tau, double score_threshold) {
    if (bank.n_base() + bank.n_novel() == 0) fail("classify: empty bank");
    if (!(tau > 0)) fail("classify: tau must be > 0");
    const ClassLogits z = class_logits(e_r, bank, /*include_novel=*/true);
    const std::vector<double> q = softmax_scaled(z.z, tau);

    std::size_t best = 0;
    for (std::size_t k = 1; k < q.size(); ++k) {
        if (q[k] > q[best]) best = k;  // ties keep the lower index
    }
    Classification out;
    out.score = q[best];
    if (best == 0 || out.score < score_threshold) {
        out.index = 0;
        out.label = "background";
        out.is_background = true;
        if (best != 0) out.score = q[0];
        return out;
    }
    out.index = static_cast<int>(best);
    out.is_background = false;
    const int k = out.index - 1;
    out.label = k < bank.n_base() ? bank.base_names[static_cast<std::size_t>(k)]
                                  : bank.novel_names[static_cast<std::size_t>(k - bank.n_base())];
    return out;
}

std::vector<double> init_background_embedding(int dim, std::uint64_t seed) {
    if (dim < 1) fail("init_background_embedding: dim must be >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> jitter(-0.01, 0.01);
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (double& x : v) x = 1.0 + jitter(rng);
    return l2_normalize(std::move(v));
}

std::pair<TextEmbeddingBank, HeadTrainReport> train_background(
    TextEmbeddingBank bank, const std::vector<LabeledProposal>& proposals, double tau,
    double lr, int max_iters, double tol) {
    HeadTrainReport report;
    for (int it = 0; it < max_iters; ++it) {
        const double loss = text_loss(proposals, bank, tau);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train_background: loss diverged at iteration " +
                                     std::to_string(it));
        }
        report.loss_trajectory.push_back(loss);
        report.iterations = it + 1;
        const std::vector<double> g = grad_text_loss_ebg(proposals, bank, tau);
        double gnorm = norm2(g);
        if (gnorm < tol) break;
        for (std::size_t d = 0; d < bank.e_bg.size(); ++d) bank.e_bg[d] -= lr * g[d];
        bank.e_bg = l2_normalize(std::move(bank.e_bg));
    }
    report.final_loss = report.loss_trajectory.empty() ? 0.0 : report.loss_trajectory.back();
    return {std::move(bank), std::move(report)};
}

TextEmbeddingBank load_text_bank(const std::string& embeddings_path,
                                 const std::string& label_map_path, std::uint64_t bg_seed) {
    const TeacherEmbeddingBank emb = load_teacher_embeddings(embeddings_path);

    std::ifstream in(label_map_path);
    if (!in) fail("cannot open label map: " + label_map_path);
    json j;
    in >> j;

    struct Entry {
        std::string name;
        int index;
        bool novel;
    };
    std::vector<Entry> entries;
    for (const json& c : j.at("classes")) {
        const std::string split = c.at("split").get<std::string>();
        if (split != "base" && split != "novel") {
            fail("label map: split must be 'base' or 'novel'");
        }
        entries.push_back({c.at("name").get<std::string>(), c.at("index").get<int>(),
                           split == "novel"});
    }
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.index < b.index; });

    TextEmbeddingBank bank;
    bank.dim = emb.dim;
    bank.prompt_template = j.value("prompt_template", "A photo of a {class} in the scene.");
    for (const Entry& e : entries) {
        const std::vector<double>* v = emb.find(static_cast<std::uint64_t>(e.index));
        if (v == nullptr) {
            fail("label map: no embedding for class '" + e.name + "' (index " +
                 std::to_string(e.index) + ")");
        }
        if (e.novel) {
            bank.novel_names.push_back(e.name);
            bank.novel_ids.push_back(e.index);
            bank.novel.push_back(*v);
        } else {
            bank.base_names.push_back(e.name);
            bank.base_ids.push_back(e.index);
            bank.base.push_back(*v);
        }
    }
    bank.e_bg = init_background_embedding(bank.dim, bg_seed);
    return bank;
}

std::string text_bank_to_json(const TextEmbeddingBank& bank) {
    json j{{"schema_version", 1},
           {"dim", bank.dim},
           {"prompt_template", bank.prompt_template},
           {"base_names", bank.base_names},
           {"base_ids", bank.base_ids},
           {"base", bank.base},
           {"novel_names", bank.novel_names},
           {"novel_ids", bank.novel_ids},
           {"novel", bank.novel},
           {"e_bg", bank.e_bg}};
    return j.dump(2);
}

TextEmbeddingBank text_bank_from_json(const std::string& text) {
    const json j = json::parse(text);
    TextEmbeddingBank bank;
    bank.dim = j.at("dim").get<int>();
    bank.prompt_template = j.at("prompt_template").get<std::string>();
    bank.base_names = j.at("base_names").get<std::vector<std::string>>();
    bank.base_ids = j.at("base_ids").get<std::vector<int>>();
    bank.base = j.at("base").get<std::vector<std::vector<double>>>();
    bank.novel_names = j.at("novel_names").get<std::vector<std::string>>();
    bank.novel_ids = j.at("novel_ids").get<std::vector<int>>();
    bank.novel = j.at("novel").get<std::vector<std::vector<double>>>();
    bank.e_bg = j.at("e_bg").get<std::vector<double>>();
    for (const auto& n : bank.base_names) {
        for (const auto& m : bank.novel_names) {
            if (n == m) fail("text bank: base and novel label sets overlap on '" + n + "'");
        }
    }
    return bank;
}

void save_text_bank(const TextEmbeddingBank& bank, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("cannot open output file: " + path);
    out << text_bank_to_json(bank) << '\n';
}

TextEmbeddingBank load_text_bank_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("cannot open text bank file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return text_bank_from_json(ss.str());
}

}  // namespace evslice
