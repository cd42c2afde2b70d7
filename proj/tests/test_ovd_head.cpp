#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "evslice/ovd_head.hpp"

using namespace evslice;

namespace {

TextEmbeddingBank axis_bank() {
    // dim 3: background on x, base "car" on y, novel "drone" on z
    TextEmbeddingBank b;
    b.dim = 3;
    b.e_bg = {1, 0, 0};
    b.base_names = {"car"};
    b.base_ids = {0};
    b.base = {{0, 1, 0}};
    b.novel_names = {"drone"};
    b.novel_ids = {1};
    b.novel = {{0, 0, 1}};
    return b;
}

MaskGrid mask(int h, int w, std::vector<double> data) {
    MaskGrid m;
    m.height = h;
    m.width = w;
    m.data = std::move(data);
    return m;
}

std::vector<double> rotate_xy(const std::vector<double>& v, double theta) {
    const double c = std::cos(theta), s = std::sin(theta);
    return {c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]};
}

}  // namespace

TEST_CASE("smooth_l1: fixtures and branch continuity") {
    CHECK(smooth_l1(0.0) == 0.0);
    CHECK(smooth_l1(0.5) == doctest::Approx(0.125));
    CHECK(smooth_l1(-0.5) == doctest::Approx(0.125));
    CHECK(smooth_l1(2.0) == doctest::Approx(1.5));
    CHECK(smooth_l1(-2.0) == doctest::Approx(1.5));
    // both branches meet at |d| = 1 with value 0.5
    CHECK(smooth_l1(1.0) == doctest::Approx(0.5));
    CHECK(smooth_l1(std::nextafter(1.0, 0.0)) == doctest::Approx(0.5));
}

TEST_CASE("ca_box_loss: foreground-only sum over box parameters") {
    const std::vector<Box> pred{{1.5, 2.0, 3.0, 4.0}, {10, 10, 5, 5}};
    const std::vector<Box> gt{{1.0, 2.0, 3.0, 4.0}, {0, 0, 1, 1}};
    // first proposal foreground: only x differs by 0.5 -> 0.125
    CHECK(ca_box_loss(pred, gt, {1, 0}) == doctest::Approx(0.125));
    // background everywhere contributes nothing regardless of the mismatch
    CHECK(ca_box_loss(pred, gt, {0, 0}) == 0.0);
    // both foreground: second adds (10-0.5) + (10-0.5) + (4-0.5) + (4-0.5) = 26
    CHECK(ca_box_loss(pred, gt, {1, 2}) == doctest::Approx(0.125 + 26.0));
    CHECK_THROWS_AS(ca_box_loss(pred, gt, {1}), std::invalid_argument);
}

TEST_CASE("ca_mask_loss: uniform-half prediction fixture") {
    // p = 0.5 everywhere: each pixel costs ln 2 whatever the target is
    const std::vector<MaskGrid> pred{mask(2, 2, {0.5, 0.5, 0.5, 0.5})};
    const std::vector<MaskGrid> gt{mask(2, 2, {0, 1, 1, 0})};
    CHECK(ca_mask_loss(pred, gt) == doctest::Approx(4 * std::log(2.0)));
    CHECK(ca_mask_loss(pred, gt, /*mean_mode=*/true) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("ca_mask_loss: symmetry under flipping prediction and target") {
    std::mt19937_64 rng(71);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> p(6), t(6), pf(6), tf(6);
        for (std::size_t k = 0; k < 6; ++k) {
            p[k] = d(rng);
            t[k] = (rng() % 2) ? 1.0 : 0.0;
            pf[k] = 1.0 - p[k];
            tf[k] = 1.0 - t[k];
        }
        const double a = ca_mask_loss({mask(2, 3, p)}, {mask(2, 3, t)});
        const double b = ca_mask_loss({mask(2, 3, pf)}, {mask(2, 3, tf)});
        CHECK(std::abs(a - b) < 1e-9);
    }
}

TEST_CASE("ca_mask_loss: clamp keeps confident mistakes finite") {
    const double wrong = ca_mask_loss({mask(1, 1, {0.0})}, {mask(1, 1, {1.0})});
    CHECK(wrong == doctest::Approx(-std::log(1e-7)));
    const double right = ca_mask_loss({mask(1, 1, {1.0})}, {mask(1, 1, {1.0})});
    CHECK(right == doctest::Approx(-std::log(1.0 - 1e-7)));
    CHECK(right < 1e-6);
}

TEST_CASE("ca_mask_loss: validation") {
    CHECK_THROWS_AS(ca_mask_loss({mask(1, 2, {0.5, 0.5})}, {mask(2, 1, {1, 0})}),
                    std::invalid_argument);
    CHECK_THROWS_AS(ca_mask_loss({mask(1, 1, {0.5})}, {mask(1, 1, {0.7})}),
                    std::invalid_argument);
    CHECK_THROWS_AS(ca_mask_loss({mask(1, 1, {0.5})}, {}), std::invalid_argument);
    CHECK(ca_mask_loss({}, {}) == 0.0);
}

TEST_CASE("cosine_sim: fixtures and scale invariance") {
    CHECK(cosine_sim({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK(cosine_sim({1, 0}, {1, 0}) == doctest::Approx(1.0));
    CHECK(cosine_sim({1, 0}, {-1, 0}) == doctest::Approx(-1.0));
    CHECK(cosine_sim({2, 0}, {1, 1}) == doctest::Approx(cosine_sim({10, 0}, {0.5, 0.5})));
    CHECK_THROWS_AS(cosine_sim({0, 0}, {1, 0}), std::invalid_argument);
    CHECK_THROWS_AS(cosine_sim({1, 0}, {1, 0, 0}), std::invalid_argument);
}

TEST_CASE("class_logits: ordering and novel inclusion") {
    const TextEmbeddingBank bank = axis_bank();
    const std::vector<double> e_r{1, 0, 0};
    const ClassLogits with = class_logits(e_r, bank, /*include_novel=*/true);
    REQUIRE(with.z.size() == 3);
    CHECK(with.z[0] == doctest::Approx(1.0));  // background
    CHECK(with.z[1] == doctest::Approx(0.0));  // car
    CHECK(with.z[2] == doctest::Approx(0.0));  // drone
    const ClassLogits base_only = class_logits(e_r, bank, /*include_novel=*/false);
    CHECK(base_only.z.size() == 2);
}

TEST_CASE("text_loss: equidistant embedding gives log of the class count") {
    // dim 3: e_bg and two base classes on axes, e_r equal-cosine to all three
    TextEmbeddingBank bank;
    bank.dim = 3;
    bank.e_bg = {1, 0, 0};
    bank.base_names = {"a", "b"};
    bank.base_ids = {0, 1};
    bank.base = {{0, 1, 0}, {0, 0, 1}};
    const double inv = 1.0 / std::sqrt(3.0);
    LabeledProposal p;
    p.embedding = {inv, inv, inv};
    p.label = 1;
    CHECK(text_loss({p}, bank, 1.0) == doctest::Approx(std::log(3.0)));
    // mean over proposals
    LabeledProposal q = p;
    q.label = 0;
    CHECK(text_loss({p, q}, bank, 1.0) == doctest::Approx(std::log(3.0)));
}

TEST_CASE("text_loss: sharp temperature drives a correct proposal to zero loss") {
    const TextEmbeddingBank bank = axis_bank();
    LabeledProposal p;
    p.embedding = {0, 1, 0};  // matches base class "car"
    p.label = 1;
    CHECK(text_loss({p}, bank, 1e-3) == doctest::Approx(0.0));
    // and a mislabeled one explodes toward the logit gap over tau
    p.label = 0;
    CHECK(text_loss({p}, bank, 1e-3) > 100.0);
}

TEST_CASE("text_loss: validation") {
    const TextEmbeddingBank bank = axis_bank();
    LabeledProposal p;
    p.embedding = {1, 0, 0};
    p.label = 2;  // outside background + 1 base class
    CHECK_THROWS_AS(text_loss({p}, bank, 1.0), std::invalid_argument);
    p.label = 0;
    CHECK_THROWS_AS(text_loss({p}, bank, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(text_loss({}, bank, 1.0), std::invalid_argument);
}

TEST_CASE("grad_text_loss_ebg: matches central finite differences") {
    std::mt19937_64 rng(73);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int trial = 0; trial < 30; ++trial) {
        TextEmbeddingBank bank;
        bank.dim = 4;
        bank.base_names = {"a", "b"};
        bank.base_ids = {0, 1};
        for (int k = 0; k < 2; ++k) {
            std::vector<double> v(4);
            for (double& x : v) x = nd(rng);
            bank.base.push_back(l2_normalize(std::move(v)));
        }
        std::vector<double> bg(4);
        for (double& x : bg) x = nd(rng);
        bank.e_bg = l2_normalize(std::move(bg));

        std::vector<LabeledProposal> props(3);
        for (std::size_t i = 0; i < props.size(); ++i) {
            std::vector<double> v(4);
            for (double& x : v) x = nd(rng);
            props[i].embedding = l2_normalize(std::move(v));
            props[i].label = static_cast<int>(rng() % 3);
        }
        const double tau = 0.2;
        const auto g = grad_text_loss_ebg(props, bank, tau);
        const double h = 1e-6;
        double max_rel = 0.0;
        for (std::size_t d = 0; d < 4; ++d) {
            TextEmbeddingBank up = bank, dn = bank;
            up.e_bg[d] += h;
            dn.e_bg[d] -= h;
            const double numeric = (text_loss(props, up, tau) - text_loss(props, dn, tau)) / (2 * h);
            const double denom = std::max({std::abs(numeric), std::abs(g[d]), 1e-6});
            max_rel = std::max(max_rel, std::abs(numeric - g[d]) / denom);
        }
        CHECK(max_rel < 1e-5);
    }
}

TEST_CASE("grad_text_loss_ebg: a descent step lowers the loss") {
    const TextEmbeddingBank start = axis_bank();
    LabeledProposal p;
    p.embedding = {0.9, 0.3, 0.0};  // near background but labeled as "car"
    p.embedding = l2_normalize(p.embedding);
    p.label = 1;
    const double tau = 0.5;
    const double before = text_loss({p}, start, tau);
    const auto g = grad_text_loss_ebg({p}, start, tau);
    TextEmbeddingBank moved = start;
    for (std::size_t d = 0; d < 3; ++d) moved.e_bg[d] -= 0.05 * g[d];
    CHECK(text_loss({p}, moved, tau) < before);
}

TEST_CASE("classify: separable embeddings pick the right category") {
    const TextEmbeddingBank bank = axis_bank();
    const Classification bg = classify({1, 0, 0}, bank, 0.1);
    CHECK(bg.is_background);
    CHECK(bg.index == 0);
    CHECK(bg.label == "background");

    const Classification car = classify({0.1, 0.99, 0.0}, bank, 0.1);
    CHECK(!car.is_background);
    CHECK(car.index == 1);
    CHECK(car.label == "car");

    const Classification drone = classify({0.0, 0.1, 0.99}, bank, 0.1);
    CHECK(drone.index == 2);
    CHECK(drone.label == "drone");
}

TEST_CASE("classify: exact ties go to the lowest index") {
    const TextEmbeddingBank bank = axis_bank();
    // equal cosine to background and "car"
    const double inv = 1.0 / std::sqrt(2.0);
    const Classification c = classify({inv, inv, 0.0}, bank, 1.0);
    CHECK(c.index == 0);
    CHECK(c.is_background);
}

TEST_CASE("classify: invariant to the scale of the region embedding") {
    const TextEmbeddingBank bank = axis_bank();
    const Classification a = classify({0.2, 0.9, 0.1}, bank, 0.07);
    const Classification b = classify({2.0, 9.0, 1.0}, bank, 0.07);
    CHECK(a.index == b.index);
    CHECK(a.score == doctest::Approx(b.score));
}

TEST_CASE("classify: below-threshold results fall back to background") {
    const TextEmbeddingBank bank = axis_bank();
    const Classification c = classify({0.1, 0.99, 0.0}, bank, 1.0, /*score_threshold=*/0.99);
    CHECK(c.is_background);
    CHECK(c.index == 0);
    // the reported score is the background probability in that case
    const ClassLogits z = class_logits(l2_normalize({0.1, 0.99, 0.0}), bank, true);
    CHECK(c.score < 0.5);
    CHECK(z.z.size() == 3);
}

TEST_CASE("classify: probabilities are invariant under a joint rotation") {
    const TextEmbeddingBank bank = axis_bank();
    TextEmbeddingBank rotated = bank;
    const double theta = 0.37;
    rotated.e_bg = rotate_xy(bank.e_bg, theta);
    rotated.base[0] = rotate_xy(bank.base[0], theta);
    rotated.novel[0] = rotate_xy(bank.novel[0], theta);
    const std::vector<double> e_r{0.3, 0.8, 0.2};
    const Classification a = classify(e_r, bank, 0.2);
    const Classification b = classify(rotate_xy(e_r, theta), rotated, 0.2);
    CHECK(a.index == b.index);
    CHECK(a.score == doctest::Approx(b.score));
}

TEST_CASE("init_background_embedding: unit norm, deterministic, seed-sensitive") {
    const auto a = init_background_embedding(8, 5);
    const auto b = init_background_embedding(8, 5);
    const auto c = init_background_embedding(8, 6);
    CHECK(a == b);
    CHECK(a != c);
    double norm = 0.0;
    for (double v : a) norm += v * v;
    CHECK(norm == doctest::Approx(1.0));
    // close to the all-ones direction
    for (double v : a) CHECK(v == doctest::Approx(1.0 / std::sqrt(8.0)).epsilon(0.05));
    CHECK_THROWS_AS(init_background_embedding(0, 1), std::invalid_argument);
}

TEST_CASE("train_background: loss drops and e_bg stays unit") {
    TextEmbeddingBank bank = axis_bank();
    bank.e_bg = l2_normalize({0.5, 0.8, 0.0});  // starts leaning into "car"
    std::vector<LabeledProposal> props(2);
    props[0].embedding = {1, 0, 0};
    props[0].label = 0;  // true background sits on x
    props[1].embedding = {0, 1, 0};
    props[1].label = 1;
    const double before = text_loss(props, bank, 0.2);
    const auto [trained, report] = train_background(bank, props, 0.2, 0.5, 200, 1e-10);
    CHECK(report.final_loss < before);
    double norm = 0.0;
    for (double v : trained.e_bg) norm += v * v;
    CHECK(norm == doctest::Approx(1.0));
    // background proposals now classify as background
    CHECK(classify(props[0].embedding, trained, 0.2).is_background);
}

TEST_CASE("load_text_bank: label map drives the base/novel split") {
    const std::string emb_path = "/tmp/evslice_ovd_text.emb";
    const std::string map_path = "/tmp/evslice_ovd_labels.json";
    {
        std::ofstream out(emb_path);
        out << "EMB 2 3\n0 1 0\n1 0 1\n2 0.70710678118654752 0.70710678118654752\n";
    }
    {
        std::ofstream out(map_path);
        out << R"({"classes":[
              {"name":"pedestrian","index":1,"split":"base"},
              {"name":"car","index":0,"split":"base"},
              {"name":"drone","index":2,"split":"novel"}],
              "prompt_template":"A photo of a {class} in the scene."})";
    }
    const TextEmbeddingBank bank = load_text_bank(emb_path, map_path, 3);
    CHECK(bank.dim == 2);
    REQUIRE(bank.n_base() == 2);
    REQUIRE(bank.n_novel() == 1);
    // sorted by label-map index
    CHECK(bank.base_names == std::vector<std::string>{"car", "pedestrian"});
    CHECK(bank.base_ids == std::vector<int>{0, 1});
    CHECK(bank.base[0] == std::vector<double>{1, 0});
    CHECK(bank.novel_names == std::vector<std::string>{"drone"});
    CHECK(bank.prompt_template == "A photo of a {class} in the scene.");
    CHECK(bank.e_bg == init_background_embedding(2, 3));

    // missing embedding for a mapped class
    {
        std::ofstream out(map_path);
        out << R"({"classes":[{"name":"ghost","index":9,"split":"base"}]})";
    }
    CHECK_THROWS_AS(load_text_bank(emb_path, map_path), std::invalid_argument);
    std::remove(emb_path.c_str());
    std::remove(map_path.c_str());
}

TEST_CASE("text bank JSON round trip") {
    TextEmbeddingBank bank = axis_bank();
    bank.prompt_template = "A photo of a {class} in the scene.";
    const TextEmbeddingBank b2 = text_bank_from_json(text_bank_to_json(bank));
    CHECK(b2.dim == bank.dim);
    CHECK(b2.base_names == bank.base_names);
    CHECK(b2.base == bank.base);
    CHECK(b2.novel_names == bank.novel_names);
    CHECK(b2.novel == bank.novel);
    CHECK(b2.e_bg == bank.e_bg);
    CHECK(b2.prompt_template == bank.prompt_template);

    // overlapping base/novel names are rejected
    TextEmbeddingBank bad = bank;
    bad.novel_names = {"car"};
    CHECK_THROWS_AS(text_bank_from_json(text_bank_to_json(bad)), std::invalid_argument);
}
