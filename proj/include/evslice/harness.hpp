#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "evslice/box.hpp"
#include "evslice/distill.hpp"
#include "evslice/event_core.hpp"
#include "evslice/ovd_head.hpp"
#include "evslice/slicing_losses.hpp"
#include "evslice/snn_slicer.hpp"

namespace evslice {

// Log verbosity comes from the EVSLICE_LOG environment variable
// (error|warn|info|debug); messages go to stderr.
enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };
void log(LogLevel level, const std::string& msg);

double iou(const Box& a, const Box& b);

struct DetectionRecord {
    std::string stream_id;
    int segment = 0;
    Box box;
    int label = 0;
    double score = 0.0;
    std::int64_t t_a = 0;
    std::int64_t t_b = 0;
};

struct GtRecord {
    std::string stream_id;
    int segment = 0;
    Box box;
    int label = 0;
};

struct MapReport {
    std::map<int, double> ap50_per_class;
    double map50 = 0.0;
    double map50_95 = 0.0;
    double map50_base = 0.0;
    double map50_novel = 0.0;
    int n_detections = 0;
    int n_ground_truth = 0;

    std::string to_json() const;
};

std::vector<double> coco_iou_thresholds();  // 0.50:0.05:0.95

// Greedy per-class matching (highest score first, one match per GT) and
// 101-point interpolated AP per class; mAP is the mean over classes that
// have ground truth.
MapReport eval_map(const std::vector<DetectionRecord>& detections,
                   const std::vector<GtRecord>& ground_truth,
                   const std::vector<double>& iou_thresholds,
                   const std::set<int>& novel_labels = {});

// Connected components (8-neighborhood) of active voxel cells, as boxes.
std::vector<Box> propose_boxes(const VoxelGrid& grid, double activity_threshold = 0.0,
                               int min_area = 4);

// 1 - mean over GT objects of the best proposal IoU; empty segments score 1.
double toy_detect_loss(const VoxelGrid& segment, const std::vector<Box>& proposals,
                       const std::vector<Box>& gt_boxes);

// Closure for detection_feedback: voxelize a leading segment, propose boxes,
// score coverage of the ground truth at the segment midpoint.
SegmentLossFn make_toy_detector(const GroundTruth& gt, int bins);

std::vector<DetectionRecord> greedy_nms(std::vector<DetectionRecord> dets, double iou_threshold);

struct PipelineConfig {
    std::string events_path;
    EventFormat events_format = EventFormat::csv;
    int sensor_width = 0;
    int sensor_height = 0;
    std::string slicer_model_path;
    std::string projection_head_path;
    std::string text_bank_path;     // trained bank JSON
    std::string ground_truth_path;
    std::string output_dir;
    std::string stream_id = "stream0";
    int n_steps = 16;
    int voxel_bins = 5;
    double classify_tau = 0.07;
    double score_threshold = 0.0;
    double nms_iou = 0.5;
    std::uint64_t seed = 0;

    std::string to_json() const;
    static PipelineConfig from_json(const std::string& text);
    // Loads and validates: every referenced input file must exist.
    static PipelineConfig load(const std::string& path);
};

struct PipelineResult {
    std::vector<DetectionRecord> detections;
    std::vector<GtRecord> gt_records;
    MapReport report;
    std::string manifest_json;
};

// parse -> features -> slicer -> segments -> voxel grids -> region
// embeddings -> classify -> NMS -> eval. Deterministic for fixed config.
PipelineResult run_pipeline(const PipelineConfig& config);

std::string detections_to_json(const std::vector<DetectionRecord>& dets);
std::vector<DetectionRecord> detections_from_json(const std::string& text);

// FNV-1a over the canonical config JSON, as a hex string.
std::string config_hash(const std::string& canonical_json);

}  // namespace evslice
