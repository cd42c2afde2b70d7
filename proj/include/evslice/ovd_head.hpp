#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evslice/box.hpp"
#include "evslice/distill.hpp"

namespace evslice {

// H x W mask; predictions live in [0,1], ground truth is binary.
struct MaskGrid {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

struct TextEmbeddingBank {
    int dim = 0;
    std::vector<std::string> base_names;
    std::vector<int> base_ids;
    std::vector<std::vector<double>> base;
    std::vector<std::string> novel_names;
    std::vector<int> novel_ids;
    std::vector<std::vector<double>> novel;
    std::vector<double> e_bg;
    std::string prompt_template;

    int n_base() const { return static_cast<int>(base.size()); }
    int n_novel() const { return static_cast<int>(novel.size()); }
};

struct ClassLogits {
    std::vector<double> z;  // [sim to e_bg, sims to categories...]
    double temperature = 1.0;
};

// label 0 = background, 1..|C_B| = base category (1-based bank index).
struct LabeledProposal {
    std::vector<double> embedding;
    int label = 0;
    Roi roi;
};

double smooth_l1(double d);

// Sum of SmoothL1 over the four box parameters of foreground proposals
// (labels[i] > 0); background contributes nothing.
double ca_box_loss(const std::vector<Box>& pred, const std::vector<Box>& gt,
                   const std::vector<int>& labels);

// Binary cross-entropy summed over masks and pixels (mean per pixel when
// mean_mode). Predictions are clamped to [eps, 1-eps] before the log.
double ca_mask_loss(const std::vector<MaskGrid>& pred, const std::vector<MaskGrid>& gt,
                    bool mean_mode = false);

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b);

// z[0] = sim(e_r, e_bg), z[k] = sim(e_r, t_k) over base (+ novel when asked).
ClassLogits class_logits(const std::vector<double>& e_r, const TextEmbeddingBank& bank,
                         bool include_novel);

// Mean cross-entropy of softmax(z / tau) against proposal labels.
double text_loss(const std::vector<LabeledProposal>& proposals, const TextEmbeddingBank& bank,
                 double tau);

// Analytic gradient of text_loss w.r.t. e_bg.
std::vector<double> grad_text_loss_ebg(const std::vector<LabeledProposal>& proposals,
                                       const TextEmbeddingBank& bank, double tau);

struct Classification {
    int index = 0;       // 0 = background, then base in order, then novel
    std::string label;   // "background" or the category name
    double score = 0.0;  // softmax probability of the chosen index
    bool is_background = true;
};

// Softmax over [e_bg, base..., novel...] at temperature tau; argmax with
// ties broken toward the lowest index. Results scoring below the threshold
// fall back to background.
Classification classify(const std::vector<double>& e_r, const TextEmbeddingBank& bank,
                        double tau, double score_threshold = 0.0);

// Normalized all-ones direction with a small seeded perturbation.
std::vector<double> init_background_embedding(int dim, std::uint64_t seed);

struct HeadTrainReport {
    int iterations = 0;
    double final_loss = 0.0;
    std::vector<double> loss_trajectory;
};

// Gradient descent on text_loss over e_bg; e_bg is re-normalized after
// every step.
std::pair<TextEmbeddingBank, HeadTrainReport> train_background(
    TextEmbeddingBank bank, const std::vector<LabeledProposal>& proposals, double tau,
    double lr, int max_iters, double tol);

// Builds a bank from an embedding file plus a label-map JSON
// ({"classes":[{"name","index","split"}], "prompt_template"}). Embedding ids
// are the label-map indices; e_bg comes from init_background_embedding.
TextEmbeddingBank load_text_bank(const std::string& embeddings_path,
                                 const std::string& label_map_path, std::uint64_t bg_seed = 0);

std::string text_bank_to_json(const TextEmbeddingBank& bank);
TextEmbeddingBank text_bank_from_json(const std::string& text);
void save_text_bank(const TextEmbeddingBank& bank, const std::string& path);
TextEmbeddingBank load_text_bank_json(const std::string& path);

}  // namespace evslice
