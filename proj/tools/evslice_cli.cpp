// evslice command line: synthetic scene generation, slicing, training and
// evaluation over the documented JSON/CSV/binary artifact formats.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "evslice/harness.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace evslice;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::invalid_argument("cannot open output file: " + path);
    out << content;
}

EventFormat parse_format(const std::string& fmt) {
    if (fmt == "csv") return EventFormat::csv;
    if (fmt == "binary" || fmt == "packed-binary") return EventFormat::packed_binary;
    throw std::invalid_argument("unknown event format '" + fmt + "'");
}

struct StreamArgs {
    std::string events;
    std::string format = "csv";
    int width = 0;
    int height = 0;

    void add(CLI::App* cmd) {
        cmd->add_option("--events", events, "Event file")->required();
        cmd->add_option("--format", format, "Event file format: csv|binary");
        cmd->add_option("--width", width, "Sensor width (csv input)");
        cmd->add_option("--height", height, "Sensor height (csv input)");
    }
    EventStream load() const {
        return parse_events(events, parse_format(format), width, height);
    }
};

json segments_json(const SliceResult& slices) {
    json segs = json::array();
    for (const auto& [a, b] : slices.segments) segs.push_back({{"t_a", a}, {"t_b", b}});
    return json{{"schema_version", 1}, {"spike_steps", slices.spike_steps}, {"segments", segs}};
}

// Labeled proposals for background training: connected-component regions
// matched against ground truth at the segment midpoint.
std::vector<LabeledProposal> build_proposals(const EventStream& stream, const GroundTruth& gt,
                                             const SliceResult& slices,
                                             const ProjectionHead& head,
                                             const TextEmbeddingBank& bank, int voxel_bins) {
    std::vector<LabeledProposal> proposals;
    for (const auto& [t_a, t_b] : slices.segments) {
        const EventStream segment = slice_window(stream, t_a, t_b);
        const VoxelGrid grid =
            to_voxel_grid(segment, t_a, t_b, voxel_bins, stream.height, stream.width);
        FeatureMap fmap;
        fmap.channels = grid.bins;
        fmap.height = grid.height;
        fmap.width = grid.width;
        fmap.data = grid.data;
        const std::int64_t mid = t_a + (t_b - t_a) / 2;
        const auto gt_boxes = gt.boxes_at(mid);
        for (const Box& box : propose_boxes(grid)) {
            const Roi roi{static_cast<int>(box.left()), static_cast<int>(box.top()),
                          std::max(1, static_cast<int>(box.w)),
                          std::max(1, static_cast<int>(box.h))};
            LabeledProposal p;
            try {
                p.embedding = region_embed(fmap, head, roi).f;
            } catch (const std::exception&) {
                continue;  // degenerate roi or zero projection
            }
            p.roi = roi;
            p.label = 0;
            double best = 0.0;
            int best_class = -1;
            for (const auto& [gbox, cls] : gt_boxes) {
                const double v = iou(box, gbox);
                if (v > best) {
                    best = v;
                    best_class = cls;
                }
            }
            if (best >= 0.5 && best_class >= 0) {
                for (int k = 0; k < bank.n_base(); ++k) {
                    if (bank.base_ids[static_cast<std::size_t>(k)] == best_class) {
                        p.label = k + 1;
                        break;
                    }
                }
            }
            proposals.push_back(std::move(p));
        }
    }
    return proposals;
}

int run(int argc, char** argv) {
    CLI::App app{"Adaptive event-stream slicing and open-vocabulary detection harness"};
    app.require_subcommand(1);

    // gen-synthetic
    auto* gen = app.add_subcommand("gen-synthetic", "Generate a seeded synthetic event scene");
    std::string gen_spec, gen_out, gen_fmt = "csv";
    gen->add_option("--spec", gen_spec, "Scene spec JSON")->required();
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--format", gen_fmt, "Event file format: csv|binary");

    // slice
    auto* slice = app.add_subcommand("slice", "Slice an event stream with a trained model");
    StreamArgs slice_stream;
    slice_stream.add(slice);
    std::string slice_model, slice_out;
    int slice_steps = 16;
    slice->add_option("--model", slice_model, "Slicer model JSON")->required();
    slice->add_option("--n-steps", slice_steps, "Step grid size");
    slice->add_option("--out", slice_out, "Output segments JSON");

    // train-slicer
    auto* trains = app.add_subcommand("train-slicer", "Train the slicing neuron on one stream");
    StreamArgs trains_stream;
    trains_stream.add(trains);
    std::string trains_gt, trains_out, trains_report, trains_config;
    trains->add_option("--gt", trains_gt, "Ground truth JSON")->required();
    trains->add_option("--model-out", trains_out, "Trained slicer model JSON")->required();
    trains->add_option("--config", trains_config, "Trainer config JSON");
    trains->add_option("--report", trains_report, "Training report JSON");

    // distill
    auto* dist = app.add_subcommand("distill", "Train the projection head against teachers");
    StreamArgs dist_stream;
    dist_stream.add(dist);
    std::string dist_rois, dist_teachers, dist_out, dist_report;
    int dist_bins = 5;
    double dist_lr = 0.05, dist_tau = 0.1, dist_tau_attn = 1.0;
    int dist_iters = 500;
    int dist_dim = 0;
    std::uint64_t dist_seed = 1;
    std::string dist_mode = "paper";
    dist->add_option("--rois", dist_rois, "ROI manifest JSON")->required();
    dist->add_option("--teachers", dist_teachers, "Teacher embedding file")->required();
    dist->add_option("--head-out", dist_out, "Trained projection head JSON")->required();
    dist->add_option("--report", dist_report, "Training report JSON");
    dist->add_option("--bins", dist_bins, "Voxel bins (student channels)");
    dist->add_option("--lr", dist_lr, "Learning rate");
    dist->add_option("--iters", dist_iters, "Max iterations");
    dist->add_option("--tau-contrast", dist_tau, "Contrastive temperature");
    dist->add_option("--tau-attn", dist_tau_attn, "Attention temperature");
    dist->add_option("--mode", dist_mode, "Denominator mode: paper|infonce");
    dist->add_option("--seed", dist_seed, "Head init seed");
    dist->add_option("--dim", dist_dim, "Teacher dimension override (checked)");

    // train-head
    auto* trainh = app.add_subcommand("train-head", "Train the background embedding");
    StreamArgs trainh_stream;
    trainh_stream.add(trainh);
    std::string trainh_gt, trainh_slicer, trainh_head, trainh_text, trainh_labels, trainh_out;
    int trainh_steps = 16, trainh_bins = 5, trainh_iters = 200;
    double trainh_tau = 0.07, trainh_lr = 0.5;
    std::uint64_t trainh_seed = 0;
    trainh->add_option("--gt", trainh_gt, "Ground truth JSON")->required();
    trainh->add_option("--slicer", trainh_slicer, "Slicer model JSON")->required();
    trainh->add_option("--head", trainh_head, "Projection head JSON")->required();
    trainh->add_option("--text-embeddings", trainh_text, "Text embedding file")->required();
    trainh->add_option("--label-map", trainh_labels, "Label map JSON")->required();
    trainh->add_option("--out", trainh_out, "Trained text bank JSON")->required();
    trainh->add_option("--n-steps", trainh_steps, "Step grid size");
    trainh->add_option("--bins", trainh_bins, "Voxel bins");
    trainh->add_option("--tau", trainh_tau, "Classification temperature");
    trainh->add_option("--lr", trainh_lr, "Learning rate");
    trainh->add_option("--iters", trainh_iters, "Max iterations");
    trainh->add_option("--bg-seed", trainh_seed, "Background embedding init seed");

    // infer
    auto* infer = app.add_subcommand("infer", "Run the full detection pipeline");
    std::string infer_config, infer_out;
    infer->add_option("--config", infer_config, "Pipeline config JSON")->required();
    infer->add_option("--out", infer_out, "Output directory override");

    // eval
    auto* eval = app.add_subcommand("eval", "Evaluate detections against ground truth");
    std::string eval_dets, eval_gt, eval_out, eval_labels;
    eval->add_option("--dets", eval_dets, "Detections JSON")->required();
    eval->add_option("--gt", eval_gt, "Ground truth JSON (parametric or records)")->required();
    eval->add_option("--out", eval_out, "Report JSON");
    eval->add_option("--label-map", eval_labels, "Label map JSON for base/novel split");

    // report
    auto* rep = app.add_subcommand("report", "Merge an eval report with a run manifest");
    std::string rep_eval, rep_manifest, rep_out;
    rep->add_option("--eval", rep_eval, "Eval report JSON")->required();
    rep->add_option("--manifest", rep_manifest, "Run manifest JSON")->required();
    rep->add_option("--out", rep_out, "Merged report JSON")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        const SyntheticSceneSpec spec = scene_spec_from_json(read_file(gen_spec));
        const auto [stream, gt] = gen_synthetic(spec);
        fs::create_directories(gen_out);
        const fs::path dir(gen_out);
        const EventFormat fmt = parse_format(gen_fmt);
        const std::string events_name = fmt == EventFormat::csv ? "events.csv" : "events.bin";
        write_events(stream, (dir / events_name).string(), fmt);
        write_file((dir / "ground_truth.json").string(), ground_truth_to_json(gt) + "\n");
        std::cout << "wrote " << (dir / events_name).string() << " ("
                  << stream.size() << " events) and "
                  << (dir / "ground_truth.json").string() << '\n';
        return 0;
    }

    if (slice->parsed()) {
        const EventStream stream = slice_stream.load();
        const auto [model, lif] = load_slicer(slice_model);
        const StepFeatures features = micro_bin_features(stream, slice_steps);
        const LifState state = integrate(input_current(model, features), lif);
        const SliceResult slices = slice_points(state, stream);
        const std::string out = segments_json(slices).dump(2) + "\n";
        if (slice_out.empty()) {
            std::cout << out;
        } else {
            write_file(slice_out, out);
        }
        return 0;
    }

    if (trains->parsed()) {
        const EventStream stream = trains_stream.load();
        const GroundTruth gt = ground_truth_from_json(read_file(trains_gt));

        LifConfig lif;
        LossWeights weights;
        OptimizerConfig opt{0.05, 500, 1e-8};
        SliceTrainingTarget target;
        int n_steps = 16, voxel_bins = 5, n_star = 0;
        if (!trains_config.empty()) {
            const json c = json::parse(read_file(trains_config));
            lif.v_th = c.value("v_th", lif.v_th);
            lif.leak = c.value("leak", lif.leak);
            weights.w_mem = c.value("w_mem", weights.w_mem);
            weights.w_lic = c.value("w_lic", weights.w_lic);
            weights.w_ssf = c.value("w_ssf", weights.w_ssf);
            opt.lr = c.value("lr", opt.lr);
            opt.max_iters = c.value("max_iters", opt.max_iters);
            opt.tol = c.value("tol", opt.tol);
            target.alpha = c.value("alpha", target.alpha);
            target.beta = c.value("beta", target.beta);
            n_steps = c.value("n_steps", n_steps);
            voxel_bins = c.value("voxel_bins", voxel_bins);
            n_star = c.value("n_star", 0);
        }

        const StepFeatures features = micro_bin_features(stream, n_steps);
        const FeedbackProfile profile =
            detection_feedback(stream, make_toy_detector(gt, voxel_bins), n_steps);
        if (n_star <= 0) {
            n_star = 1;
            for (int n = 2; n <= n_steps; ++n) {
                if (profile.l_m[static_cast<std::size_t>(n - 1)] <
                    profile.l_m[static_cast<std::size_t>(n_star - 1)]) {
                    n_star = n;
                }
            }
        }
        target.n_star = n_star;

        const std::vector<TrainSample> dataset{TrainSample{features, target, profile}};
        auto [model, report] = train_slicer(SlicerModel{}, dataset, lif, weights, opt);
        save_slicer(model, lif, trains_out);
        if (!trains_report.empty()) write_file(trains_report, report.to_json() + "\n");
        std::cout << "trained slicer (target step " << n_star << ", "
                  << report.iterations << " iterations, final loss "
                  << report.final_loss << ") -> " << trains_out << '\n';
        return 0;
    }

    if (dist->parsed()) {
        const EventStream stream = dist_stream.load();
        const TeacherEmbeddingBank teachers = load_teacher_embeddings(dist_teachers);
        if (dist_dim > 0 && teachers.dim != dist_dim) {
            throw std::invalid_argument("teacher dimension mismatch");
        }
        const VoxelGrid grid = to_voxel_grid(stream, stream.t0, stream.t_end(), dist_bins,
                                             stream.height, stream.width);
        FeatureMap fmap;
        fmap.channels = grid.bins;
        fmap.height = grid.height;
        fmap.width = grid.width;
        fmap.data = grid.data;
        const AttentionMap attn = attention_map(fmap, dist_tau_attn);

        std::vector<StudentRegion> regions;
        std::vector<std::vector<double>> aligned;
        const json rois = json::parse(read_file(dist_rois));
        for (const json& r : rois) {
            const std::uint64_t id = r.at("roi_id").get<std::uint64_t>();
            const auto b = r.at("box").get<std::vector<double>>();
            const Roi roi{static_cast<int>(b.at(0)), static_cast<int>(b.at(1)),
                          static_cast<int>(b.at(2)), static_cast<int>(b.at(3))};
            const std::vector<double>* teacher = teachers.find(id);
            if (teacher == nullptr) {
                throw std::invalid_argument("no teacher embedding for roi_id " +
                                            std::to_string(id));
            }
            StudentRegion region;
            region.pooled = roi_average_pool(fmap, roi);
            region.attention = region_attention_weight(attn, roi);
            regions.push_back(std::move(region));
            aligned.push_back(*teacher);
        }

        DistillConfig config;
        config.tau_attn = dist_tau_attn;
        config.tau_contrast = dist_tau;
        if (dist_mode == "infonce") {
            config.denominator_mode = DenominatorMode::infonce;
        } else if (dist_mode != "paper") {
            throw std::invalid_argument("unknown denominator mode '" + dist_mode + "'");
        }

        ProjectionHead head;
        head.in_dim = dist_bins;
        head.out_dim = teachers.dim;
        std::mt19937_64 rng(dist_seed);
        std::normal_distribution<double> init(0.0, 0.1);
        head.weight.resize(static_cast<std::size_t>(head.in_dim) * head.out_dim);
        head.bias.resize(static_cast<std::size_t>(head.out_dim));
        for (double& v : head.weight) v = init(rng);
        for (double& v : head.bias) v = init(rng);

        auto [trained, report] =
            train_projection(std::move(head), regions, aligned, config, dist_lr, dist_iters, 1e-9);
        save_projection(trained, dist_out);
        if (!dist_report.empty()) {
            json jr{{"schema_version", 1},
                    {"iterations", report.iterations},
                    {"final_loss", report.final_loss},
                    {"loss_trajectory", report.loss_trajectory}};
            write_file(dist_report, jr.dump(2) + "\n");
        }
        std::cout << "trained projection head (" << report.iterations
                  << " iterations, final loss " << report.final_loss << ") -> " << dist_out
                  << '\n';
        return 0;
    }

    if (trainh->parsed()) {
        const EventStream stream = trainh_stream.load();
        const GroundTruth gt = ground_truth_from_json(read_file(trainh_gt));
        const auto [slicer, lif] = load_slicer(trainh_slicer);
        const ProjectionHead head = load_projection(trainh_head);
        TextEmbeddingBank bank = load_text_bank(trainh_text, trainh_labels, trainh_seed);

        const StepFeatures features = micro_bin_features(stream, trainh_steps);
        const LifState state = integrate(input_current(slicer, features), lif);
        const SliceResult slices = slice_points(state, stream);
        const std::vector<LabeledProposal> proposals =
            build_proposals(stream, gt, slices, head, bank, trainh_bins);
        if (proposals.empty()) {
            throw std::invalid_argument("train-head: no proposals extracted from the stream");
        }
        auto [trained, report] =
            train_background(std::move(bank), proposals, trainh_tau, trainh_lr, trainh_iters, 1e-9);
        save_text_bank(trained, trainh_out);
        std::cout << "trained background embedding on " << proposals.size() << " proposals ("
                  << report.iterations << " iterations, final loss " << report.final_loss
                  << ") -> " << trainh_out << '\n';
        return 0;
    }

    if (infer->parsed()) {
        PipelineConfig config = PipelineConfig::load(infer_config);
        if (!infer_out.empty()) config.output_dir = infer_out;
        const PipelineResult result = run_pipeline(config);
        std::cout << "detections: " << result.detections.size()
                  << ", mAP50: " << result.report.map50
                  << ", mAP50:95: " << result.report.map50_95 << '\n';
        std::cout << "artifacts written to " << config.output_dir << '\n';
        return 0;
    }

    if (eval->parsed()) {
        const std::vector<DetectionRecord> dets = detections_from_json(read_file(eval_dets));
        const json gt_json = json::parse(read_file(eval_gt));

        std::vector<GtRecord> records;
        if (gt_json.contains("records")) {
            for (const json& r : gt_json.at("records")) {
                GtRecord g;
                g.stream_id = r.at("stream_id").get<std::string>();
                g.segment = r.at("segment").get<int>();
                const auto b = r.at("box").get<std::vector<double>>();
                g.box = Box{b.at(0), b.at(1), b.at(2), b.at(3)};
                g.label = r.at("label").get<int>();
                records.push_back(g);
            }
        } else {
            // Parametric ground truth: sample boxes at each detection segment's midpoint.
            const GroundTruth gt = ground_truth_from_json(gt_json.dump());
            std::set<std::pair<std::string, std::pair<int, std::int64_t>>> seen;
            for (const DetectionRecord& d : dets) {
                if (!seen.insert({d.stream_id, {d.segment, d.t_a}}).second) continue;
                const std::int64_t mid = d.t_a + (d.t_b - d.t_a) / 2;
                for (const auto& [box, label] : gt.boxes_at(mid)) {
                    records.push_back(GtRecord{d.stream_id, d.segment, box, label});
                }
            }
        }

        std::set<int> novel;
        if (!eval_labels.empty()) {
            const json lm = json::parse(read_file(eval_labels));
            for (const json& c : lm.at("classes")) {
                if (c.at("split").get<std::string>() == "novel") {
                    novel.insert(c.at("index").get<int>());
                }
            }
        }
        const MapReport report = eval_map(dets, records, coco_iou_thresholds(), novel);
        const std::string out = report.to_json() + "\n";
        if (eval_out.empty()) {
            std::cout << out;
        } else {
            write_file(eval_out, out);
            std::cout << "mAP50: " << report.map50 << ", mAP50:95: " << report.map50_95 << '\n';
        }
        return 0;
    }

    if (rep->parsed()) {
        json merged{{"schema_version", 1},
                    {"report", json::parse(read_file(rep_eval))},
                    {"manifest", json::parse(read_file(rep_manifest))}};
        write_file(rep_out, merged.dump(2) + "\n");
        std::cout << "wrote " << rep_out << '\n';
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << '\n';
        return 2;
    }
}
