#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace evslice {

// C x H x W feature tensor (event- or image-side).
struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    double at(int c, int y, int x) const {
        return data[static_cast<std::size_t>((c * height + y) * width + x)];
    }
    double& at(int c, int y, int x) {
        return data[static_cast<std::size_t>((c * height + y) * width + x)];
    }
};

// Softmax-normalized spatial attention; entries are positive and sum to 1.
struct AttentionMap {
    int height = 0;
    int width = 0;
    double temperature = 1.0;
    std::vector<double> data;

    double at(int y, int x) const {
        return data[static_cast<std::size_t>(y) * width + x];
    }
    double sum() const;
};

// Rectangle in feature-map cells, top-left anchored.
struct Roi {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    int area() const { return w * h; }
};

// Affine map from the event feature space (C) to the teacher embedding
// space (D). weight is row-major D x C.
struct ProjectionHead {
    int in_dim = 0;
    int out_dim = 0;
    std::vector<double> weight;
    std::vector<double> bias;

    std::vector<double> apply(const std::vector<double>& v) const;
};

struct RegionEmbedding {
    std::vector<double> f;
    Roi roi;
    bool unit_norm = true;
};

struct TeacherEmbeddingBank {
    int dim = 0;
    std::vector<std::uint64_t> ids;
    std::vector<std::vector<double>> vectors;
    std::string source;

    std::size_t size() const { return ids.size(); }
    const std::vector<double>* find(std::uint64_t id) const;
};

enum class DenominatorMode { paper, infonce };

struct DistillConfig {
    double tau_attn = 1.0;
    double tau_contrast = 0.1;
    DenominatorMode denominator_mode = DenominatorMode::paper;
};

// (1/C) sum_c |F_{c,i,j}| per position, flattened H*W.
std::vector<double> channel_abs_pool(const FeatureMap& f);

// softmax over all positions of channel_abs_pool(f) / tau.
AttentionMap attention_map(const FeatureMap& f, double tau);

// Elementwise mean of two attention maps; still a distribution.
AttentionMap fuse_attention(const AttentionMap& a, const AttentionMap& b);

// Attention mass inside the roi, rescaled so a uniform map gives 1.
double region_attention_weight(const AttentionMap& a, const Roi& roi);

// Mean of the feature map over the roi, one value per channel.
std::vector<double> roi_average_pool(const FeatureMap& f, const Roi& roi);

// roi_average_pool -> projection head -> L2 normalize.
RegionEmbedding region_embed(const FeatureMap& f_evt, const ProjectionHead& head, const Roi& roi);

// Text or packed-binary embedding file (sniffed by magic); vectors are
// unit-normalized on load.
TeacherEmbeddingBank load_teacher_embeddings(const std::string& path);
void save_teacher_embeddings(const TeacherEmbeddingBank& bank, const std::string& path,
                             bool binary = false);

// One student region ready for distillation: the roi-pooled event feature
// (pre-projection) and its fused attention weight.
struct StudentRegion {
    std::vector<double> pooled;
    double attention = 1.0;
};

// Contrastive distillation loss over aligned (student embedding, attention)
// and teacher vectors. Paper mode excludes the positive from the denominator;
// infonce mode includes it.
double f2e_loss(const std::vector<std::pair<std::vector<double>, double>>& students,
                const std::vector<std::vector<double>>& teachers, const DistillConfig& config);

// Same loss expressed through the projection head, for training.
double f2e_loss_regions(const std::vector<StudentRegion>& regions, const ProjectionHead& head,
                        const std::vector<std::vector<double>>& teachers,
                        const DistillConfig& config);

struct HeadGradient {
    std::vector<double> d_weight;
    std::vector<double> d_bias;

    double norm() const;
};

HeadGradient grad_f2e(const std::vector<StudentRegion>& regions, const ProjectionHead& head,
                      const std::vector<std::vector<double>>& teachers,
                      const DistillConfig& config);

struct DistillTrainReport {
    int iterations = 0;
    double final_loss = 0.0;
    std::vector<double> loss_trajectory;
};

// Full-batch gradient descent on f2e_loss_regions.
std::pair<ProjectionHead, DistillTrainReport> train_projection(
    ProjectionHead head, const std::vector<StudentRegion>& regions,
    const std::vector<std::vector<double>>& teachers, const DistillConfig& config,
    double lr, int max_iters, double tol);

std::string projection_to_json(const ProjectionHead& head);
ProjectionHead projection_from_json(const std::string& text);
void save_projection(const ProjectionHead& head, const std::string& path);
ProjectionHead load_projection(const std::string& path);

std::vector<double> l2_normalize(std::vector<double> v);

}  // namespace evslice
