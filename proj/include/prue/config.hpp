#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "prue/errors.hpp"
#include "prue/pruning.hpp"
#include "prue/tensor.hpp"
#include "prue/train.hpp"

// Declarative experiment description (one JSON document) plus the JSON-lines
// metrics format every command appends to. The config hash is FNV-1a64 over
// the normalized re-serialization, so key order and whitespace in the source
// file never matter, while any semantic change (a flag override included)
// produces a new hash.
namespace prue {

struct TaskConfig {
    std::string dataset = "proto-images";  // proto-images | blobs | idx | cifar10
    std::size_t num_classes = 10;
    Shape input_shape = {1, 14, 14};
    std::size_t per_class_train = 1000;
    std::size_t per_class_val = 200;
    double separation = 4.0;        // blobs only
    double noise_sigma = 0.25;      // proto-images only: per-pixel noise
    std::size_t max_shift = 2;      // proto-images only: translation radius
    std::uint64_t data_seed = 1234; // synthetic generation / subset draw
    std::vector<std::string> train_paths;  // idx: images, labels; cifar10: record files
    std::vector<std::string> val_paths;
    bool normalize = false;
    std::vector<double> normalize_mean;
    std::vector<double> normalize_std;
};

struct PruneSection {
    ScoreMethod method = ScoreMethod::prue;
    std::vector<double> sparsities = {0.5};
    std::size_t finetune_epochs = 0;  // 0 = derive from the training epochs
    std::size_t score_batchsize = 256;
};

struct DistillSection {
    double tau = 1.0;
    double lambda = 1.0;
    std::size_t epochs = 0;  // 0 = reuse training epochs
};

struct ExperimentConfig {
    TaskConfig task;
    std::string teacher_arch = "cnn-s";
    std::string student_arch = "mlp-s";
    TrainConfig training;
    PruneSection pruning;
    DistillSection distill;
    std::vector<std::uint64_t> seeds = {1};
    std::string out_dir = "runs";

    void validate() const;  // ConfigError naming the offending dotted key path
    nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
};

ExperimentConfig load_experiment_config(const std::string& path);

// 16 lowercase hex digits over the normalized serialization.
std::string config_hash(const ExperimentConfig& cfg);

// "0.9" or "90%" -> 0.9; anything outside [0,1) or non-numeric -> ConfigError.
double parse_sparsity(const std::string& text);

// --------------------------------------------------------------------------
// RunRecord: one JSON object per line; every line carries the run identity.
// --------------------------------------------------------------------------

struct EpochRow {
    std::size_t epoch = 0;
    std::string split;      // "train" | "val"
    double loss = -1;       // -1 when not measured
    double accuracy = -1;
    double delta = -1;
    double delta_1e2 = -1;
    double lr = -1;
};

struct RunSummary {
    double teacher_accuracy = -1;
    double teacher_delta = -1;
    double student_accuracy = -1;
    double sparsity = 0;
    std::string method = "none";  // pruning method, or "dense" / "vanilla"
    double ce_weight = -1;        // hard-label loss weight of a distill run, -1 elsewhere
};

struct RunRecord {
    std::string run_id;
    std::string config_hash;
    std::string command;  // producing subcommand
    std::uint64_t seed = 0;
    std::vector<EpochRow> rows;
    bool has_summary = false;
    RunSummary summary;
};

// Serializes the record to path (truncating), one JSON object per line.
void write_run_record(const std::string& path, const RunRecord& rec);

// Parses one JSONL file; lines group by run id. Enforces per-split strictly
// increasing epochs. IoError names the offending line number.
std::vector<RunRecord> read_run_records(const std::string& path);

// All *.jsonl under dir, lexicographic file order.
std::vector<RunRecord> read_run_records_dir(const std::string& dir);

// method -> sparsity -> mean of student accuracies over the summaries that
// carry one. Backs the pruning-comparison grid.
struct GridCell {
    std::string method;
    double sparsity = 0;
    double mean_student_accuracy = 0;
    std::size_t runs = 0;
};
std::vector<GridCell> student_accuracy_grid(const std::vector<RunRecord>& records);

}  // namespace prue
