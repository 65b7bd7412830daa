#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prue/config.hpp"
#include "prue/dataset.hpp"
#include "prue/pruning.hpp"

// Orchestration layer shared by the CLI subcommands and the sweep driver:
// dataset assembly from a TaskConfig, run naming, and the end-to-end runs
// (train / prune / distill / measure) that tie the library together. Every
// run writes a checkpoint and/or a JSONL metrics record under out_dir and
// prints a short human report to stdout.
namespace prue {

struct BuiltTask {
    Dataset<float> train;
    Dataset<float> val;
};

// Materializes the train/val splits a config describes. Synthetic datasets
// (proto-images, blobs) generate from task.data_seed; file-backed datasets
// (idx, cifar10) load and then draw a per-class subset with the same seed,
// so the sample set is fixed across run seeds.
BuiltTask build_task(const TaskConfig& task);

// ---------------------------------------------------------------------------
// Run naming. The sweep driver predicts child checkpoint paths with these,
// so every spelling lives here.
// ---------------------------------------------------------------------------

// 0.5 -> "s500" (per-mille, rounded).
std::string sparsity_tag(double s);

std::string teacher_run_id(const std::string& arch, std::uint64_t seed, const std::string& hash);
std::string vanilla_run_id(const std::string& arch, std::uint64_t seed, const std::string& hash);
std::string prune_run_id(const std::string& arch, ScoreMethod method, double s, std::uint64_t seed,
                         const std::string& hash);

std::string checkpoint_path(const std::string& out_dir, const std::string& run_id);
std::string record_path(const std::string& out_dir, const std::string& run_id);

struct RunPaths {
    std::string checkpoint;  // empty when the run saves no model
    std::string record;
};

// ---------------------------------------------------------------------------
// End-to-end runs. `hash` is the config hash after any flag overrides; it is
// stamped into every record line and checkpoint header.
// ---------------------------------------------------------------------------

// role: "teacher" (teacher_arch, summary carries accuracy and delta) or
// "student-vanilla" (student_arch trained on hard labels only).
RunPaths run_train_role(const ExperimentConfig& cfg, const std::string& hash,
                        const std::string& role, std::uint64_t seed, const std::string& out_dir);

// Loads the dense teacher, scores/masks/fine-tunes at sparsity s, saves the
// sparse checkpoint with its score vector attached.
RunPaths run_prune(const ExperimentConfig& cfg, const std::string& hash,
                   const std::string& teacher_ckpt, ScoreMethod method, double s,
                   std::uint64_t seed, const std::string& out_dir);

// Loads a (dense or pruned) teacher, trains a fresh student against its
// soft labels. The summary records the teacher's accuracy, delta, sparsity
// and pruning method next to the student accuracy.
RunPaths run_distill(const ExperimentConfig& cfg, const std::string& hash,
                     const std::string& teacher_ckpt, std::uint64_t seed,
                     const std::string& out_dir);

// Measures delta on one split; mode "direct" or "two-pass". Writes a single
// record row plus a summary and prints the per-class audit.
RunPaths run_uncertainty(const ExperimentConfig& cfg, const std::string& hash,
                         const std::string& ckpt, const std::string& split,
                         const std::string& mode, std::size_t batchsize,
                         const std::string& out_dir);

// Accuracy and mean loss on one split.
RunPaths run_eval(const ExperimentConfig& cfg, const std::string& hash, const std::string& ckpt,
                  const std::string& split, const std::string& out_dir);

// Softmax outputs in storage order as CSV (index,label,p0..p{K-1}), rows
// filtered to the given classes (empty = all). Returns rows written.
std::size_t run_dump_predictions(const ExperimentConfig& cfg, const std::string& ckpt,
                                 const std::string& split, const std::vector<int>& classes,
                                 const std::string& out_csv);

}  // namespace prue
