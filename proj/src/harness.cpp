#include "evslice/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <queue>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace evslice {

namespace {
using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

LogLevel current_log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("EVSLICE_LOG");
        if (env == nullptr) return LogLevel::warn;
        const std::string v(env);
        if (v == "error") return LogLevel::error;
        if (v == "warn") return LogLevel::warn;
        if (v == "info") return LogLevel::info;
        if (v == "debug") return LogLevel::debug;
        return LogLevel::warn;
    }();
    return level;
}

std::string read_file(const std::string& path, const char* what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(std::string(what) + ": cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail("cannot open output file: " + path);
    out << content;
}

json box_to_json(const Box& b) { return json::array({b.x, b.y, b.w, b.h}); }

Box box_from_json(const json& j) {
    return Box{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
               j.at(3).get<double>()};
}
}  // namespace

void log(LogLevel level, const std::string& msg) {
    static const char* names[] = {"error", "warn", "info", "debug"};
    if (static_cast<int>(level) <= static_cast<int>(current_log_level())) {
        std::cerr << "[evslice:" << names[static_cast<int>(level)] << "] " << msg << '\n';
    }
}

double iou(const Box& a, const Box& b) {
    if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0) fail("iou: boxes need positive extents");
    const double ix = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
    const double iy = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::vector<double> coco_iou_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
    return t;
}

namespace {
// 101-point interpolated AP from (recall, precision) points of a ranked
// detection list.
double ap_101(const std::vector<double>& recall, const std::vector<double>& precision) {
    double ap = 0.0;
    for (int i = 0; i <= 100; ++i) {
        const double r = i / 100.0;
        double best = 0.0;
        for (std::size_t k = 0; k < recall.size(); ++k) {
            if (recall[k] >= r - 1e-12) best = std::max(best, precision[k]);
        }
        ap += best;
    }
    return ap / 101.0;
}

struct GtSlot {
    Box box;
    bool matched = false;
};

// AP for one class at one IoU threshold.
double class_ap(const std::vector<const DetectionRecord*>& dets,
                const std::vector<GtRecord>& gts, int label, double threshold) {
    std::map<std::pair<std::string, int>, std::vector<GtSlot>> gt_by_image;
    std::size_t n_gt = 0;
    for (const GtRecord& g : gts) {
        if (g.label != label) continue;
        gt_by_image[{g.stream_id, g.segment}].push_back(GtSlot{g.box});
        ++n_gt;
    }
    if (n_gt == 0) return 0.0;

    std::vector<double> recall, precision;
    std::size_t tp = 0, fp = 0;
    for (const DetectionRecord* d : dets) {
        auto it = gt_by_image.find({d->stream_id, d->segment});
        double best = -1.0;
        GtSlot* best_slot = nullptr;
        if (it != gt_by_image.end()) {
            for (GtSlot& slot : it->second) {
                if (slot.matched) continue;
                const double v = iou(d->box, slot.box);
                if (v > best) {
                    best = v;
                    best_slot = &slot;
                }
            }
        }
        if (best_slot != nullptr && best >= threshold) {
            best_slot->matched = true;
            ++tp;
        } else {
            ++fp;
        }
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    return ap_101(recall, precision);
}
}  // namespace

MapReport eval_map(const std::vector<DetectionRecord>& detections,
                   const std::vector<GtRecord>& ground_truth,
                   const std::vector<double>& iou_thresholds,
                   const std::set<int>& novel_labels) {
    if (iou_thresholds.empty()) fail("eval_map: needs at least one IoU threshold");

    std::set<int> classes;
    for (const GtRecord& g : ground_truth) classes.insert(g.label);
    for (const DetectionRecord& d : detections) {
        if (d.score < 0.0 || d.score > 1.0) fail("eval_map: detection score outside [0, 1]");
    }

    // Rank per class once: score descending, stable for ties.
    std::map<int, std::vector<const DetectionRecord*>> ranked;
    for (const DetectionRecord& d : detections) ranked[d.label].push_back(&d);
    for (auto& [label, dets] : ranked) {
        std::stable_sort(dets.begin(), dets.end(),
                         [](const DetectionRecord* a, const DetectionRecord* b) {
                             return a->score > b->score;
                         });
    }

    MapReport report;
    report.n_detections = static_cast<int>(detections.size());
    report.n_ground_truth = static_cast<int>(ground_truth.size());

    static const std::vector<const DetectionRecord*> kNoDets;
    double map_sum_all = 0.0;
    for (double threshold : iou_thresholds) {
        double sum = 0.0;
        for (int label : classes) {
            const auto it = ranked.find(label);
            const auto& dets = it == ranked.end() ? kNoDets : it->second;
            const double ap = class_ap(dets, ground_truth, label, threshold);
            sum += ap;
            if (std::abs(threshold - 0.5) < 1e-9) report.ap50_per_class[label] = ap;
        }
        map_sum_all += classes.empty() ? 0.0 : sum / static_cast<double>(classes.size());
    }
    report.map50_95 = map_sum_all / static_cast<double>(iou_thresholds.size());

    double base_sum = 0.0, novel_sum = 0.0, all_sum = 0.0;
    int base_n = 0, novel_n = 0;
    for (const auto& [label, ap] : report.ap50_per_class) {
        all_sum += ap;
        if (novel_labels.count(label)) {
            novel_sum += ap;
            ++novel_n;
        } else {
            base_sum += ap;
            ++base_n;
        }
    }
    const int all_n = base_n + novel_n;
    report.map50 = all_n > 0 ? all_sum / all_n : 0.0;
    report.map50_base = base_n > 0 ? base_sum / base_n : 0.0;
    report.map50_novel = novel_n > 0 ? novel_sum / novel_n : 0.0;
    return report;
}

std::string MapReport::to_json() const {
    json per_class = json::object();
    for (const auto& [label, ap] : ap50_per_class) per_class[std::to_string(label)] = ap;
    json j{{"schema_version", 1},
           {"ap50_per_class", per_class},
           {"map50", map50},
           {"map50_95", map50_95},
           {"map50_base", map50_base},
           {"map50_novel", map50_novel},
           {"n_detections", n_detections},
           {"n_ground_truth", n_ground_truth}};
    return j.dump(2);
}

std::vector<Box> propose_boxes(const VoxelGrid& grid, double activity_threshold, int min_area) {
    const int h = grid.height;
    const int w = grid.width;
    std::vector<std::uint8_t> active(static_cast<std::size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int b = 0; b < grid.bins; ++b) s += std::abs(grid.at(b, y, x));
            if (s > activity_threshold) active[static_cast<std::size_t>(y) * w + x] = 1;
        }
    }

    std::vector<Box> boxes;
    std::vector<std::uint8_t> seen(active.size(), 0);
    for (int y0 = 0; y0 < h; ++y0) {
        for (int x0 = 0; x0 < w; ++x0) {
            const std::size_t start = static_cast<std::size_t>(y0) * w + x0;
            if (!active[start] || seen[start]) continue;
            int minx = x0, maxx = x0, miny = y0, maxy = y0, count = 0;
            std::queue<std::pair<int, int>> q;
            q.emplace(x0, y0);
            seen[start] = 1;
            while (!q.empty()) {
                const auto [x, y] = q.front();
                q.pop();
                ++count;
                minx = std::min(minx, x);
                maxx = std::max(maxx, x);
                miny = std::min(miny, y);
                maxy = std::max(maxy, y);
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int nx = x + dx, ny = y + dy;
                        if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
                        const std::size_t idx = static_cast<std::size_t>(ny) * w + nx;
                        if (active[idx] && !seen[idx]) {
                            seen[idx] = 1;
                            q.emplace(nx, ny);
                        }
                    }
                }
            }
            if (count < min_area) continue;
            const double bw = maxx - minx + 1;
            const double bh = maxy - miny + 1;
            boxes.push_back(Box{minx + bw / 2.0, miny + bh / 2.0, bw, bh});
        }
    }
    return boxes;
}

double toy_detect_loss(const VoxelGrid& segment, const std::vector<Box>& proposals,
                       const std::vector<Box>& gt_boxes) {
    if (segment.mass() == 0.0) return 1.0;
    if (gt_boxes.empty()) return 0.0;
    double total = 0.0;
    for (const Box& g : gt_boxes) {
        double best = 0.0;
        for (const Box& p : proposals) best = std::max(best, iou(p, g));
        total += 1.0 - best;
    }
    return total / static_cast<double>(gt_boxes.size());
}

SegmentLossFn make_toy_detector(const GroundTruth& gt, int bins) {
    return [gt, bins](const EventStream& segment) {
        const VoxelGrid grid = to_voxel_grid(segment, segment.t0, segment.t_end(), bins,
                                             gt.height, gt.width);
        const std::vector<Box> proposals = propose_boxes(grid);
        const std::int64_t mid = segment.t0 + segment.span / 2;
        std::vector<Box> gt_boxes;
        for (const auto& [box, label] : gt.boxes_at(mid)) gt_boxes.push_back(box);
        return toy_detect_loss(grid, proposals, gt_boxes);
    };
}

std::vector<DetectionRecord> greedy_nms(std::vector<DetectionRecord> dets, double iou_threshold) {
    std::stable_sort(dets.begin(), dets.end(),
                     [](const DetectionRecord& a, const DetectionRecord& b) {
                         return a.score > b.score;
                     });
    std::vector<DetectionRecord> kept;
    for (const DetectionRecord& d : dets) {
        bool suppressed = false;
        for (const DetectionRecord& k : kept) {
            if (k.stream_id == d.stream_id && k.segment == d.segment && k.label == d.label &&
                iou(k.box, d.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

// --- pipeline ---------------------------------------------------------------

std::string PipelineConfig::to_json() const {
    json j{{"schema_version", 1},
           {"events_path", events_path},
           {"events_format", events_format == EventFormat::csv ? "csv" : "packed-binary"},
           {"sensor_width", sensor_width},
           {"sensor_height", sensor_height},
           {"slicer_model_path", slicer_model_path},
           {"projection_head_path", projection_head_path},
           {"text_bank_path", text_bank_path},
           {"ground_truth_path", ground_truth_path},
           {"output_dir", output_dir},
           {"stream_id", stream_id},
           {"n_steps", n_steps},
           {"voxel_bins", voxel_bins},
           {"classify_tau", classify_tau},
           {"score_threshold", score_threshold},
           {"nms_iou", nms_iou},
           {"seed", seed}};
    return j.dump(2);
}

PipelineConfig PipelineConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    PipelineConfig c;
    c.events_path = j.at("events_path").get<std::string>();
    const std::string fmt = j.value("events_format", "csv");
    if (fmt == "csv") {
        c.events_format = EventFormat::csv;
    } else if (fmt == "packed-binary") {
        c.events_format = EventFormat::packed_binary;
    } else {
        fail("pipeline config: unknown events_format '" + fmt + "'");
    }
    c.sensor_width = j.value("sensor_width", 0);
    c.sensor_height = j.value("sensor_height", 0);
    c.slicer_model_path = j.at("slicer_model_path").get<std::string>();
    c.projection_head_path = j.at("projection_head_path").get<std::string>();
    c.text_bank_path = j.at("text_bank_path").get<std::string>();
    c.ground_truth_path = j.at("ground_truth_path").get<std::string>();
    c.output_dir = j.value("output_dir", ".");
    c.stream_id = j.value("stream_id", "stream0");
    c.n_steps = j.value("n_steps", 16);
    c.voxel_bins = j.value("voxel_bins", 5);
    c.classify_tau = j.value("classify_tau", 0.07);
    c.score_threshold = j.value("score_threshold", 0.0);
    c.nms_iou = j.value("nms_iou", 0.5);
    c.seed = j.value("seed", std::uint64_t{0});
    return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
    const PipelineConfig c = from_json(read_file(path, "pipeline config"));
    for (const std::string& p : {c.events_path, c.slicer_model_path, c.projection_head_path,
                                 c.text_bank_path, c.ground_truth_path}) {
        if (!std::filesystem::exists(p)) {
            fail("pipeline config: referenced file does not exist: " + p);
        }
    }
    return c;
}

namespace {
FeatureMap voxel_to_feature_map(const VoxelGrid& g) {
    FeatureMap f;
    f.channels = g.bins;
    f.height = g.height;
    f.width = g.width;
    f.data = g.data;
    return f;
}

Roi box_to_roi(const Box& b) {
    const int x0 = static_cast<int>(std::floor(b.left()));
    const int y0 = static_cast<int>(std::floor(b.top()));
    const int x1 = static_cast<int>(std::ceil(b.right()));
    const int y1 = static_cast<int>(std::ceil(b.bottom()));
    return Roi{x0, y0, std::max(1, x1 - x0), std::max(1, y1 - y0)};
}

[[noreturn]] void stage_fail(const char* stage, const std::exception& e) {
    throw std::runtime_error(std::string("pipeline stage '") + stage + "' failed: " + e.what());
}
}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config) {
    PipelineResult result;

    EventStream stream;
    try {
        stream = parse_events(config.events_path, config.events_format, config.sensor_width,
                              config.sensor_height);
    } catch (const std::exception& e) {
        stage_fail("parse-events", e);
    }
    log(LogLevel::info, "parsed " + std::to_string(stream.size()) + " events");

    SlicerModel slicer;
    LifConfig lif;
    ProjectionHead head;
    TextEmbeddingBank bank;
    GroundTruth gt;
    try {
        std::tie(slicer, lif) = load_slicer(config.slicer_model_path);
        head = load_projection(config.projection_head_path);
        bank = load_text_bank_json(config.text_bank_path);
        gt = ground_truth_from_json(read_file(config.ground_truth_path, "ground truth"));
    } catch (const std::exception& e) {
        stage_fail("load-models", e);
    }

    SliceResult slices;
    try {
        const StepFeatures features = micro_bin_features(stream, config.n_steps);
        const LifState state = integrate(input_current(slicer, features), lif);
        slices = slice_points(state, stream);
    } catch (const std::exception& e) {
        stage_fail("slice", e);
    }
    log(LogLevel::info, "slicer produced " + std::to_string(slices.segments.size()) + " segments");

    std::vector<DetectionRecord> detections;
    try {
        for (std::size_t seg = 0; seg < slices.segments.size(); ++seg) {
            const auto [t_a, t_b] = slices.segments[seg];
            const EventStream segment = slice_window(stream, t_a, t_b);
            const VoxelGrid grid = to_voxel_grid(segment, t_a, t_b, config.voxel_bins,
                                                 stream.height, stream.width);
            const FeatureMap fmap = voxel_to_feature_map(grid);
            for (const Box& box : propose_boxes(grid)) {
                const RegionEmbedding emb = region_embed(fmap, head, box_to_roi(box));
                const Classification cls =
                    classify(emb.f, bank, config.classify_tau, config.score_threshold);
                if (cls.is_background) continue;
                const int k = cls.index - 1;
                const int label = k < bank.n_base()
                                      ? bank.base_ids[static_cast<std::size_t>(k)]
                                      : bank.novel_ids[static_cast<std::size_t>(k - bank.n_base())];
                detections.push_back(DetectionRecord{config.stream_id,
                                                     static_cast<int>(seg), box, label,
                                                     cls.score, t_a, t_b});
            }
        }
        detections = greedy_nms(std::move(detections), config.nms_iou);
    } catch (const std::exception& e) {
        stage_fail("detect", e);
    }

    std::set<int> novel_labels(bank.novel_ids.begin(), bank.novel_ids.end());
    try {
        for (std::size_t seg = 0; seg < slices.segments.size(); ++seg) {
            const auto [t_a, t_b] = slices.segments[seg];
            const std::int64_t mid = t_a + (t_b - t_a) / 2;
            for (const auto& [box, label] : gt.boxes_at(mid)) {
                result.gt_records.push_back(
                    GtRecord{config.stream_id, static_cast<int>(seg), box, label});
            }
        }
        result.report = eval_map(detections, result.gt_records, coco_iou_thresholds(),
                                 novel_labels);
    } catch (const std::exception& e) {
        stage_fail("eval", e);
    }

    result.detections = std::move(detections);
    const std::string canonical = config.to_json();
    json manifest{{"schema_version", 1},
                  {"tool", "evslice"},
                  {"version", "0.1.0"},
                  {"config", json::parse(canonical)},
                  {"config_hash", config_hash(canonical)},
                  {"seed", config.seed}};
    result.manifest_json = manifest.dump(2);

    if (!config.output_dir.empty()) {
        std::filesystem::create_directories(config.output_dir);
        const std::filesystem::path dir(config.output_dir);
        write_file((dir / "detections.json").string(), detections_to_json(result.detections));
        write_file((dir / "report.json").string(), result.report.to_json());
        write_file((dir / "manifest.json").string(), result.manifest_json);
    }
    return result;
}

std::string detections_to_json(const std::vector<DetectionRecord>& dets) {
    json arr = json::array();
    for (const DetectionRecord& d : dets) {
        arr.push_back({{"stream_id", d.stream_id},
                       {"segment", d.segment},
                       {"box", box_to_json(d.box)},
                       {"label", d.label},
                       {"score", d.score},
                       {"t_a", d.t_a},
                       {"t_b", d.t_b}});
    }
    json j{{"schema_version", 1}, {"detections", arr}};
    return j.dump(2);
}

std::vector<DetectionRecord> detections_from_json(const std::string& text) {
    const json j = json::parse(text);
    std::vector<DetectionRecord> dets;
    for (const json& d : j.at("detections")) {
        DetectionRecord r;
        r.stream_id = d.at("stream_id").get<std::string>();
        r.segment = d.at("segment").get<int>();
        r.box = box_from_json(d.at("box"));
        r.label = d.at("label").get<int>();
        r.score = d.at("score").get<double>();
        r.t_a = d.value("t_a", std::int64_t{0});
        r.t_b = d.value("t_b", std::int64_t{0});
        dets.push_back(r);
    }
    return dets;
}

std::string config_hash(const std::string& canonical_json) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical_json) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace evslice
