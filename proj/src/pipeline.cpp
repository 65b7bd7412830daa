#include "prue/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "prue/arch.hpp"
#include "prue/checkpoint.hpp"
#include "prue/distill.hpp"
#include "prue/model.hpp"
#include "prue/train.hpp"
#include "prue/uncertainty.hpp"

namespace prue {

namespace {

BuiltTask built_from_synthetic(const TaskConfig& t) {
    BuiltTask out;
    if (t.dataset == "blobs") {
        BlobsOptions opt;
        opt.num_classes = t.num_classes;
        opt.dim = numel(t.input_shape);
        opt.separation = t.separation;
        opt.seed = t.data_seed;
        opt.per_class = t.per_class_train;
        opt.split = "train";
        out.train = make_blobs<float>(opt);
        opt.per_class = t.per_class_val;
        opt.split = "val";
        out.val = make_blobs<float>(opt);
        return out;
    }
    if (t.input_shape.size() != 3 || t.input_shape[0] != 1) {
        throw ConfigError("config: task.input_shape: proto-images needs [1,H,W], got " +
                          shape_to_string(t.input_shape));
    }
    ProtoImageOptions opt;
    opt.num_classes = t.num_classes;
    opt.height = t.input_shape[1];
    opt.width = t.input_shape[2];
    opt.noise_sigma = t.noise_sigma;
    opt.max_shift = t.max_shift;
    opt.seed = t.data_seed;
    opt.per_class = t.per_class_train;
    opt.split = "train";
    out.train = make_proto_images<float>(opt);
    opt.per_class = t.per_class_val;
    opt.split = "val";
    out.val = make_proto_images<float>(opt);
    return out;
}

BuiltTask built_from_files(const TaskConfig& t) {
    NormalizeOptions norm;
    norm.standardize = t.normalize;
    norm.mean = t.normalize_mean;
    norm.std = t.normalize_std;

    BuiltTask out;
    if (t.dataset == "idx") {
        if (t.val_paths.size() != 2) {
            throw ConfigError("config: task.val_paths: idx needs [images, labels], got " +
                              std::to_string(t.val_paths.size()) + " entries");
        }
        out.train = dataset_from_idx<float>(t.train_paths[0], t.train_paths[1], t.num_classes,
                                            "train", norm);
        out.val = dataset_from_idx<float>(t.val_paths[0], t.val_paths[1], t.num_classes, "val",
                                          norm);
    } else {
        if (t.val_paths.empty()) {
            throw ConfigError("config: task.val_paths: cifar10 needs at least one record file");
        }
        if (t.num_classes != 10) {
            throw ConfigError("config: task.num_classes: cifar10 has 10 classes, got " +
                              std::to_string(t.num_classes));
        }
        out.train = dataset_from_cifar10<float>(t.train_paths, "train", norm);
        out.val = dataset_from_cifar10<float>(t.val_paths, "val", norm);
    }
    out.train = subset(out.train, t.per_class_train, t.data_seed);
    out.val = subset(out.val, t.per_class_val, t.data_seed);
    return out;
}

void apply_task_normalization(BuiltTask& task, const TaskConfig& t) {
    NormalizeOptions norm;
    norm.standardize = t.normalize;
    norm.mean = t.normalize_mean;
    norm.std = t.normalize_std;
    apply_normalization(task.train, norm);
    apply_normalization(task.val, norm);
}

std::string seed_tag(std::uint64_t seed) { return "seed" + std::to_string(seed); }

std::string hash8(const std::string& hash) { return hash.substr(0, 8); }

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
}

std::vector<EpochRow> rows_from(const TrainResult& result) {
    std::vector<EpochRow> rows;
    for (const auto& e : result.epochs) {
        EpochRow r;
        r.epoch = e.epoch;
        r.split = "train";
        r.loss = e.train_loss;
        r.accuracy = e.train_accuracy;
        r.lr = e.lr;
        rows.push_back(r);
        if (e.val_accuracy >= 0) {
            EpochRow v;
            v.epoch = e.epoch;
            v.split = "val";
            v.accuracy = e.val_accuracy;
            v.lr = e.lr;
            rows.push_back(v);
        }
    }
    return rows;
}

void print_epochs(const TrainResult& result) {
    for (const auto& e : result.epochs) {
        std::printf("  epoch %zu lr %.4g loss %.4f", e.epoch, e.lr, e.train_loss);
        if (e.train_accuracy >= 0) std::printf(" acc %.4f", e.train_accuracy);
        if (e.val_accuracy >= 0) std::printf(" val %.4f", e.val_accuracy);
        std::printf("\n");
    }
}

// Pruning method of a stored model: the attached score vector if there is
// exactly one, otherwise inferred from the masks.
std::string stored_method_label(const LoadedCheckpoint<float>& loaded,
                                const SparsityReport<float>& rep) {
    if (loaded.scores.size() == 1) return to_string(loaded.scores[0].method);
    return rep.zeros == 0 ? "dense" : "sparse";
}

void check_data_compatible(const Model<float>& model, const Dataset<float>& ds,
                           const std::string& ckpt) {
    const auto& spec = model.spec();
    if (spec.input_shape != ds.input_shape || spec.num_classes != ds.num_classes) {
        throw ConfigError("checkpoint '" + ckpt + "' stores a model for input " +
                          shape_to_string(spec.input_shape) + " with " +
                          std::to_string(spec.num_classes) + " classes, but the task provides " +
                          shape_to_string(ds.input_shape) + " with " +
                          std::to_string(ds.num_classes));
    }
}

const Dataset<float>& pick_split(const BuiltTask& task, const std::string& split) {
    if (split == "train") return task.train;
    if (split == "val") return task.val;
    throw ConfigError("split must be 'train' or 'val', got '" + split + "'");
}

}  // namespace

BuiltTask build_task(const TaskConfig& t) {
    if (t.dataset == "blobs" || t.dataset == "proto-images") {
        BuiltTask out = built_from_synthetic(t);
        apply_task_normalization(out, t);
        return out;
    }
    return built_from_files(t);
}

std::string sparsity_tag(double s) {
    return "s" + std::to_string(static_cast<long long>(std::llround(s * 1000.0)));
}

std::string teacher_run_id(const std::string& arch, std::uint64_t seed, const std::string& hash) {
    return "teacher-" + arch + "-" + seed_tag(seed) + "-" + hash8(hash);
}

std::string vanilla_run_id(const std::string& arch, std::uint64_t seed, const std::string& hash) {
    return "vanilla-" + arch + "-" + seed_tag(seed) + "-" + hash8(hash);
}

std::string prune_run_id(const std::string& arch, ScoreMethod method, double s,
                         std::uint64_t seed, const std::string& hash) {
    return "prune-" + arch + "-" + to_string(method) + "-" + sparsity_tag(s) + "-" +
           seed_tag(seed) + "-" + hash8(hash);
}

std::string checkpoint_path(const std::string& out_dir, const std::string& run_id) {
    return out_dir + "/" + run_id + ".prue";
}

std::string record_path(const std::string& out_dir, const std::string& run_id) {
    return out_dir + "/" + run_id + ".jsonl";
}

RunPaths run_train_role(const ExperimentConfig& cfg, const std::string& hash,
                        const std::string& role, std::uint64_t seed, const std::string& out_dir) {
    bool teacher = role == "teacher";
    if (!teacher && role != "student-vanilla") {
        throw ConfigError("role must be 'teacher' or 'student-vanilla', got '" + role + "'");
    }
    BuiltTask task = build_task(cfg.task);
    const std::string& arch = teacher ? cfg.teacher_arch : cfg.student_arch;
    auto spec = make_preset(arch, task.train.input_shape, task.train.num_classes);
    auto model = Model<float>::build(spec, seed);

    std::printf("%s %s on %s (%zu train / %zu val), seed %llu\n", role.c_str(), arch.c_str(),
                cfg.task.dataset.c_str(), task.train.size(), task.val.size(),
                static_cast<unsigned long long>(seed));
    auto result = train<float>(model, task.train, &task.val, cfg.training, seed);
    print_epochs(result);

    RunRecord rec;
    rec.run_id = teacher ? teacher_run_id(arch, seed, hash) : vanilla_run_id(arch, seed, hash);
    rec.config_hash = hash;
    rec.command = "train";
    rec.seed = seed;
    rec.rows = rows_from(result);
    rec.has_summary = true;
    double val_acc = evaluate(model, task.val).accuracy;
    if (teacher) {
        rec.summary.teacher_accuracy = val_acc;
        rec.summary.teacher_delta = delta_direct(model, task.train).delta;
        rec.summary.method = "dense";
        std::printf("val accuracy %.4f, train-split delta %.9g\n", val_acc,
                    rec.summary.teacher_delta);
    } else {
        rec.summary.student_accuracy = val_acc;
        rec.summary.method = "vanilla";
        std::printf("val accuracy %.4f\n", val_acc);
    }

    ensure_dir(out_dir);
    RunPaths paths;
    paths.checkpoint = checkpoint_path(out_dir, rec.run_id);
    paths.record = record_path(out_dir, rec.run_id);
    checkpoint_save(paths.checkpoint, model, {}, hash);
    write_run_record(paths.record, rec);
    std::printf("wrote %s\n", paths.checkpoint.c_str());
    return paths;
}

RunPaths run_prune(const ExperimentConfig& cfg, const std::string& hash,
                   const std::string& teacher_ckpt, ScoreMethod method, double s,
                   std::uint64_t seed, const std::string& out_dir) {
    BuiltTask task = build_task(cfg.task);
    auto expected = make_preset(cfg.teacher_arch, task.train.input_shape, task.train.num_classes);
    auto loaded = checkpoint_load<float>(teacher_ckpt, &expected);
    Model<float>& model = loaded.model;

    TrainConfig ft = default_finetune(cfg.training);
    if (cfg.pruning.finetune_epochs > 0) ft.epochs = cfg.pruning.finetune_epochs;

    std::printf("prune %s with %s at %s, then fine-tune %zu epochs at lr %.4g\n",
                cfg.teacher_arch.c_str(), to_string(method).c_str(), sparsity_tag(s).c_str(),
                ft.epochs, ft.optimizer.lr);
    auto outcome = prune_and_finetune<float>(model, method, s, task.train, &task.val, ft, seed,
                                             cfg.pruning.score_batchsize);
    print_epochs(outcome.finetune);

    double train_delta = delta_direct(model, task.train).delta;
    std::printf("val accuracy %.4f -> %.4f, val delta %.9g -> %.9g\n",
                outcome.eval_before.accuracy, outcome.eval_after.accuracy,
                outcome.delta_before.delta, outcome.delta_after.delta);
    std::printf("train-split delta after fine-tune %.9g, sparsity %.6f (%zu of %zu weights zero)\n",
                train_delta, outcome.sparsity, model.sparsity_report().zeros,
                model.sparsity_report().total);

    RunRecord rec;
    rec.run_id = prune_run_id(cfg.teacher_arch, method, s, seed, hash);
    rec.config_hash = hash;
    rec.command = "prune";
    rec.seed = seed;
    rec.rows = rows_from(outcome.finetune);
    rec.has_summary = true;
    rec.summary.teacher_accuracy = outcome.eval_after.accuracy;
    rec.summary.teacher_delta = train_delta;
    rec.summary.sparsity = outcome.sparsity;
    rec.summary.method = to_string(method);

    ensure_dir(out_dir);
    RunPaths paths;
    paths.checkpoint = checkpoint_path(out_dir, rec.run_id);
    paths.record = record_path(out_dir, rec.run_id);
    checkpoint_save(paths.checkpoint, model, {outcome.scores}, hash);
    write_run_record(paths.record, rec);
    std::printf("wrote %s\n", paths.checkpoint.c_str());
    return paths;
}

RunPaths run_distill(const ExperimentConfig& cfg, const std::string& hash,
                     const std::string& teacher_ckpt, std::uint64_t seed,
                     const std::string& out_dir) {
    BuiltTask task = build_task(cfg.task);
    auto expected = make_preset(cfg.teacher_arch, task.train.input_shape, task.train.num_classes);
    auto loaded = checkpoint_load<float>(teacher_ckpt, &expected);
    const Model<float>& teacher = loaded.model;

    auto rep = teacher.sparsity_report();
    std::string label = stored_method_label(loaded, rep);
    std::string teacher_tag = rep.zeros == 0 ? label : label + "-" + sparsity_tag(rep.global);

    double teacher_delta = delta_direct(teacher, task.train).delta;
    double teacher_acc = evaluate(teacher, task.val).accuracy;

    auto spec = make_preset(cfg.student_arch, task.train.input_shape, task.train.num_classes);
    auto student = Model<float>::build(spec, seed);

    DistillConfig dc;
    dc.tau = cfg.distill.tau;
    dc.lambda = cfg.distill.lambda;
    dc.train = cfg.training;
    if (cfg.distill.epochs > 0) dc.train.epochs = cfg.distill.epochs;

    std::printf(
        "distill %s from %s teacher (val acc %.4f, train delta %.9g), tau %.4g lambda %.4g\n",
        cfg.student_arch.c_str(), teacher_tag.c_str(), teacher_acc, teacher_delta, dc.tau,
        dc.lambda);
    auto result = distill<float>(teacher, student, task.train, &task.val, dc, seed, teacher_delta);
    print_epochs(result.epochs);

    RunRecord rec;
    rec.run_id = "distill-" + cfg.student_arch + "-from-" + teacher_tag + "-" + seed_tag(seed) +
                 "-" + hash8(hash);
    rec.config_hash = hash;
    rec.command = "distill";
    rec.seed = seed;
    rec.rows = rows_from(result.epochs);
    rec.has_summary = true;
    rec.summary.teacher_accuracy = teacher_acc;
    rec.summary.teacher_delta = teacher_delta;
    rec.summary.student_accuracy = evaluate(student, task.val).accuracy;
    rec.summary.sparsity = rep.global;
    rec.summary.method = label;
    rec.summary.ce_weight = 1.0 - dc.lambda;
    std::printf("student val accuracy %.4f\n", rec.summary.student_accuracy);

    ensure_dir(out_dir);
    RunPaths paths;
    paths.checkpoint = checkpoint_path(out_dir, rec.run_id);
    paths.record = record_path(out_dir, rec.run_id);
    checkpoint_save(paths.checkpoint, student, {}, hash);
    write_run_record(paths.record, rec);
    std::printf("wrote %s\n", paths.checkpoint.c_str());
    return paths;
}

RunPaths run_uncertainty(const ExperimentConfig& cfg, const std::string& hash,
                         const std::string& ckpt, const std::string& split,
                         const std::string& mode, std::size_t batchsize,
                         const std::string& out_dir) {
    if (mode != "direct" && mode != "two-pass") {
        throw ConfigError("mode must be 'direct' or 'two-pass', got '" + mode + "'");
    }
    BuiltTask task = build_task(cfg.task);
    const Dataset<float>& ds = pick_split(task, split);
    auto loaded = checkpoint_load<float>(ckpt);
    Model<float>& model = loaded.model;
    check_data_compatible(model, ds, ckpt);

    UncertaintyReport report;
    if (mode == "direct") {
        report = delta_direct(model, ds, batchsize);
    } else {
        DeltaOptions opt;
        opt.batchsize = batchsize;
        report = delta_two_pass(model, ds, opt);
    }
    double acc = evaluate(model, ds, batchsize).accuracy;
    auto rep = model.sparsity_report();

    std::printf("delta %.9g (x100: %.6f) on %s split, %zu samples, %s estimator\n", report.delta,
                report.delta_1e2(), split.c_str(), report.sample_count, mode.c_str());
    std::printf("accuracy %.4f, sparsity %.6f\n", acc, rep.global);
    std::printf("per-class n:");
    for (std::size_t c = 0; c < report.class_counts.size(); ++c) {
        std::printf(" %zu", report.class_counts[c]);
    }
    std::printf("\n");
    if (!report.singleton_classes.empty()) {
        std::printf("warning: singleton classes (variance zero by fiat):");
        for (auto c : report.singleton_classes) std::printf(" %zu", c);
        std::printf("\n");
    }

    RunRecord rec;
    rec.run_id = "uncertainty-" + std::filesystem::path(ckpt).stem().string() + "-" + split +
                 "-" + mode;
    rec.config_hash = hash;
    rec.command = "uncertainty";
    rec.seed = 0;
    EpochRow row;
    row.epoch = 0;
    row.split = split;
    row.accuracy = acc;
    row.delta = report.delta;
    row.delta_1e2 = report.delta_1e2();
    rec.rows.push_back(row);
    rec.has_summary = true;
    rec.summary.teacher_accuracy = acc;
    rec.summary.teacher_delta = report.delta;
    rec.summary.sparsity = rep.global;
    rec.summary.method = stored_method_label(loaded, rep);

    ensure_dir(out_dir);
    RunPaths paths;
    paths.record = record_path(out_dir, rec.run_id);
    write_run_record(paths.record, rec);
    return paths;
}

RunPaths run_eval(const ExperimentConfig& cfg, const std::string& hash, const std::string& ckpt,
                  const std::string& split, const std::string& out_dir) {
    BuiltTask task = build_task(cfg.task);
    const Dataset<float>& ds = pick_split(task, split);
    auto loaded = checkpoint_load<float>(ckpt);
    check_data_compatible(loaded.model, ds, ckpt);

    auto r = evaluate(loaded.model, ds);
    std::printf("%s split: accuracy %.4f, mean loss %.6f (%zu samples)\n", split.c_str(),
                r.accuracy, r.mean_loss, ds.size());

    RunRecord rec;
    rec.run_id = "eval-" + std::filesystem::path(ckpt).stem().string() + "-" + split;
    rec.config_hash = hash;
    rec.command = "eval";
    rec.seed = 0;
    EpochRow row;
    row.epoch = 0;
    row.split = split;
    row.loss = r.mean_loss;
    row.accuracy = r.accuracy;
    rec.rows.push_back(row);

    ensure_dir(out_dir);
    RunPaths paths;
    paths.record = record_path(out_dir, rec.run_id);
    write_run_record(paths.record, rec);
    return paths;
}

std::size_t run_dump_predictions(const ExperimentConfig& cfg, const std::string& ckpt,
                                 const std::string& split, const std::vector<int>& classes,
                                 const std::string& out_csv) {
    BuiltTask task = build_task(cfg.task);
    const Dataset<float>& ds = pick_split(task, split);
    auto loaded = checkpoint_load<float>(ckpt);
    const Model<float>& model = loaded.model;
    check_data_compatible(model, ds, ckpt);

    std::set<int> keep(classes.begin(), classes.end());
    for (int c : keep) {
        if (c < 0 || static_cast<std::size_t>(c) >= ds.num_classes) {
            throw ConfigError("class " + std::to_string(c) + " outside [0," +
                              std::to_string(ds.num_classes) + ")");
        }
    }
    bool all = keep.empty();

    std::ofstream f(out_csv, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + out_csv + "' for writing");
    f << "index,label";
    for (std::size_t k = 0; k < ds.num_classes; ++k) f << ",p" << k;
    f << "\n";

    NoGradGuard ng;
    const std::size_t K = ds.num_classes;
    const std::size_t batchsize = 256;
    std::size_t written = 0;
    char buf[32];
    for (std::size_t start = 0; start < ds.size(); start += batchsize) {
        std::size_t end = std::min(ds.size(), start + batchsize);
        std::vector<std::size_t> idx(end - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        auto batch = make_batch(ds, idx);
        auto logits = model.forward(batch.x);
        const auto& v = logits.values();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            int label = batch.labels[i];
            if (!all && keep.count(label) == 0) continue;
            const float* row = &v[i * K];
            float mx = *std::max_element(row, row + K);
            double denom = 0;
            for (std::size_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(row[k] - mx));
            f << idx[i] << "," << label;
            for (std::size_t k = 0; k < K; ++k) {
                double p = std::exp(static_cast<double>(row[k] - mx)) / denom;
                std::snprintf(buf, sizeof buf, "%.9g", p);
                f << "," << buf;
            }
            f << "\n";
            ++written;
        }
    }
    f.flush();
    if (!f) throw IoError("write failure on '" + out_csv + "'");
    return written;
}

}  // namespace prue
