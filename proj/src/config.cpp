#include "prue/config.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "prue/arch.hpp"
#include "prue/rng.hpp"

namespace prue {

namespace {

using nlohmann::json;

[[noreturn]] void bad_key(const std::string& path, const std::string& what) {
    throw ConfigError("config: " + path + ": " + what);
}

void reject_unknown_keys(const json& j, const std::string& path,
                         const std::set<std::string>& allowed) {
    if (!j.is_object()) bad_key(path, "expected an object");
    for (const auto& item : j.items()) {
        if (allowed.count(item.key()) == 0) {
            throw ConfigError("config: unknown key '" +
                              (path.empty() ? item.key() : path + "." + item.key()) + "'");
        }
    }
}

template <class T>
void get_field(const json& j, const std::string& path, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception&) {
        bad_key(path.empty() ? key : path + "." + key, "wrong type");
    }
}

double sparsity_element(const json& e, const std::string& path) {
    if (e.is_string()) {
        try {
            return parse_sparsity(e.get<std::string>());
        } catch (const ConfigError& err) {
            bad_key(path, err.what());
        }
    }
    if (e.is_number()) {
        double v = e.get<double>();
        if (!(v >= 0.0) || v >= 1.0) {
            bad_key(path, "sparsity must lie in [0,1), got " + std::to_string(v));
        }
        return v;
    }
    bad_key(path, "expected a number or a string like \"90%\"");
}

json task_to_json(const TaskConfig& t) {
    return {{"dataset", t.dataset},
            {"num_classes", t.num_classes},
            {"input_shape", t.input_shape},
            {"per_class_train", t.per_class_train},
            {"per_class_val", t.per_class_val},
            {"separation", t.separation},
            {"noise_sigma", t.noise_sigma},
            {"max_shift", t.max_shift},
            {"data_seed", t.data_seed},
            {"train_paths", t.train_paths},
            {"val_paths", t.val_paths},
            {"normalize", t.normalize},
            {"normalize_mean", t.normalize_mean},
            {"normalize_std", t.normalize_std}};
}

TaskConfig task_from_json(const json& j) {
    reject_unknown_keys(j, "task",
                        {"dataset", "num_classes", "input_shape", "per_class_train",
                         "per_class_val", "separation", "noise_sigma", "max_shift", "data_seed",
                         "train_paths", "val_paths", "normalize", "normalize_mean",
                         "normalize_std"});
    TaskConfig t;
    get_field(j, "task", "dataset", t.dataset);
    get_field(j, "task", "num_classes", t.num_classes);
    get_field(j, "task", "input_shape", t.input_shape);
    get_field(j, "task", "per_class_train", t.per_class_train);
    get_field(j, "task", "per_class_val", t.per_class_val);
    get_field(j, "task", "separation", t.separation);
    get_field(j, "task", "noise_sigma", t.noise_sigma);
    get_field(j, "task", "max_shift", t.max_shift);
    get_field(j, "task", "data_seed", t.data_seed);
    get_field(j, "task", "train_paths", t.train_paths);
    get_field(j, "task", "val_paths", t.val_paths);
    get_field(j, "task", "normalize", t.normalize);
    get_field(j, "task", "normalize_mean", t.normalize_mean);
    get_field(j, "task", "normalize_std", t.normalize_std);
    return t;
}

json training_to_json(const TrainConfig& c) {
    json drops = json::array();
    for (const auto& d : c.optimizer.schedule) {
        drops.push_back({{"epoch", d.epoch}, {"factor", d.factor}});
    }
    return {{"epochs", c.epochs},
            {"batchsize", c.batchsize},
            {"lr", c.optimizer.lr},
            {"momentum", c.optimizer.momentum},
            {"nesterov", c.optimizer.nesterov},
            {"lr_drops", drops},
            {"smoothing", c.smoothing_alpha},
            {"eval_train", c.eval_train}};
}

TrainConfig training_from_json(const json& j) {
    reject_unknown_keys(j, "training",
                        {"epochs", "batchsize", "lr", "momentum", "nesterov", "lr_drops",
                         "smoothing", "eval_train"});
    TrainConfig c;
    get_field(j, "training", "epochs", c.epochs);
    get_field(j, "training", "batchsize", c.batchsize);
    get_field(j, "training", "lr", c.optimizer.lr);
    get_field(j, "training", "momentum", c.optimizer.momentum);
    get_field(j, "training", "nesterov", c.optimizer.nesterov);
    get_field(j, "training", "smoothing", c.smoothing_alpha);
    get_field(j, "training", "eval_train", c.eval_train);
    if (j.contains("lr_drops")) {
        if (!j.at("lr_drops").is_array()) bad_key("training.lr_drops", "expected an array");
        std::size_t i = 0;
        for (const auto& e : j.at("lr_drops")) {
            std::string path = "training.lr_drops[" + std::to_string(i++) + "]";
            reject_unknown_keys(e, path, {"epoch", "factor"});
            LrDrop d;
            get_field(e, path, "epoch", d.epoch);
            get_field(e, path, "factor", d.factor);
            c.optimizer.schedule.push_back(d);
        }
    }
    return c;
}

}  // namespace

void ExperimentConfig::validate() const {
    const std::set<std::string> datasets = {"proto-images", "blobs", "idx", "cifar10"};
    if (datasets.count(task.dataset) == 0) {
        bad_key("task.dataset", "unknown dataset '" + task.dataset + "'");
    }
    if (task.num_classes < 2) bad_key("task.num_classes", "need at least 2 classes");
    if (task.input_shape.empty()) bad_key("task.input_shape", "must not be empty");
    if (task.per_class_train == 0) bad_key("task.per_class_train", "must be > 0");
    if (task.noise_sigma < 0) bad_key("task.noise_sigma", "must be >= 0");
    if (task.dataset == "idx" && task.train_paths.size() != 2) {
        bad_key("task.train_paths", "idx needs [images, labels], got " +
                                        std::to_string(task.train_paths.size()) + " entries");
    }
    if (task.dataset == "cifar10" && task.train_paths.empty()) {
        bad_key("task.train_paths", "cifar10 needs at least one record file");
    }
    if (task.normalize && task.normalize_mean.size() != task.normalize_std.size()) {
        bad_key("task.normalize_mean", "mean and std must have equal per-channel lengths");
    }
    if (!is_known_preset(teacher_arch)) {
        bad_key("teacher", "unknown architecture '" + teacher_arch + "'");
    }
    if (!is_known_preset(student_arch)) {
        bad_key("student", "unknown architecture '" + student_arch + "'");
    }
    try {
        training.optimizer.validate();
    } catch (const ConfigError& e) {
        bad_key("training", e.what());
    }
    if (training.smoothing_alpha < 0 || training.smoothing_alpha >= 1) {
        bad_key("training.smoothing", "must lie in [0,1), got " +
                                          std::to_string(training.smoothing_alpha));
    }
    if (training.batchsize == 0) bad_key("training.batchsize", "must be > 0");
    for (std::size_t i = 0; i < pruning.sparsities.size(); ++i) {
        double s = pruning.sparsities[i];
        if (!(s >= 0.0) || s >= 1.0) {
            bad_key("pruning.sparsities[" + std::to_string(i) + "]",
                    "sparsity must lie in [0,1), got " + std::to_string(s));
        }
    }
    if (pruning.score_batchsize == 0) bad_key("pruning.score_batchsize", "must be > 0");
    if (!(distill.tau > 0)) bad_key("distill.tau", "must be > 0");
    if (distill.lambda < 0 || distill.lambda > 1) bad_key("distill.lambda", "must lie in [0,1]");
    if (seeds.empty()) bad_key("seeds", "must not be empty");
    if (out_dir.empty()) bad_key("out_dir", "must not be empty");
}

nlohmann::json ExperimentConfig::to_json() const {
    return {{"task", task_to_json(task)},
            {"teacher", teacher_arch},
            {"student", student_arch},
            {"training", training_to_json(training)},
            {"pruning",
             {{"method", to_string(pruning.method)},
              {"sparsities", pruning.sparsities},
              {"finetune_epochs", pruning.finetune_epochs},
              {"score_batchsize", pruning.score_batchsize}}},
            {"distill",
             {{"tau", distill.tau}, {"lambda", distill.lambda}, {"epochs", distill.epochs}}},
            {"seeds", seeds},
            {"out_dir", out_dir}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    reject_unknown_keys(j, "",
                        {"task", "teacher", "student", "training", "pruning", "distill", "seeds",
                         "out_dir"});
    ExperimentConfig cfg;
    if (j.contains("task")) cfg.task = task_from_json(j.at("task"));
    get_field(j, "", "teacher", cfg.teacher_arch);
    get_field(j, "", "student", cfg.student_arch);
    if (j.contains("training")) cfg.training = training_from_json(j.at("training"));
    if (j.contains("pruning")) {
        const auto& p = j.at("pruning");
        reject_unknown_keys(p, "pruning",
                            {"method", "sparsities", "finetune_epochs", "score_batchsize"});
        if (p.contains("method")) {
            std::string m;
            get_field(p, "pruning", "method", m);
            try {
                cfg.pruning.method = score_method_from_string(m);
            } catch (const ConfigError& e) {
                bad_key("pruning.method", e.what());
            }
        }
        if (p.contains("sparsities")) {
            if (!p.at("sparsities").is_array()) bad_key("pruning.sparsities", "expected an array");
            cfg.pruning.sparsities.clear();
            std::size_t i = 0;
            for (const auto& e : p.at("sparsities")) {
                cfg.pruning.sparsities.push_back(
                    sparsity_element(e, "pruning.sparsities[" + std::to_string(i++) + "]"));
            }
        }
        get_field(p, "pruning", "finetune_epochs", cfg.pruning.finetune_epochs);
        get_field(p, "pruning", "score_batchsize", cfg.pruning.score_batchsize);
    }
    if (j.contains("distill")) {
        const auto& d = j.at("distill");
        reject_unknown_keys(d, "distill", {"tau", "lambda", "epochs"});
        get_field(d, "distill", "tau", cfg.distill.tau);
        get_field(d, "distill", "lambda", cfg.distill.lambda);
        get_field(d, "distill", "epochs", cfg.distill.epochs);
    }
    get_field(j, "", "seeds", cfg.seeds);
    get_field(j, "", "out_dir", cfg.out_dir);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "'");
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    return ExperimentConfig::from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
    json j = cfg.to_json();
    j.erase("out_dir");  // output location is not part of the experiment identity
    std::string canonical = j.dump();
    std::uint64_t h = fnv1a64(canonical);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

double parse_sparsity(const std::string& text) {
    std::string body = text;
    bool percent = false;
    if (!body.empty() && body.back() == '%') {
        percent = true;
        body.pop_back();
    }
    double v = 0;
    std::size_t used = 0;
    try {
        v = std::stod(body, &used);
    } catch (const std::exception&) {
        throw ConfigError("sparsity '" + text + "' is not a number");
    }
    if (used != body.size()) throw ConfigError("sparsity '" + text + "' is not a number");
    if (percent) v /= 100.0;
    if (!(v >= 0.0) || v >= 1.0) {
        throw ConfigError("sparsity '" + text + "' must lie in [0,1) after parsing, got " +
                          std::to_string(v));
    }
    return v;
}

// --------------------------------------------------------------------------
// RunRecord JSONL
// --------------------------------------------------------------------------

void write_run_record(const std::string& path, const RunRecord& rec) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    auto stamp = [&rec](json& j) {
        j["run_id"] = rec.run_id;
        j["config_hash"] = rec.config_hash;
        j["command"] = rec.command;
        j["seed"] = rec.seed;
    };
    for (const auto& row : rec.rows) {
        json j = {{"type", "epoch"},       {"epoch", row.epoch}, {"split", row.split},
                  {"loss", row.loss},      {"accuracy", row.accuracy},
                  {"delta", row.delta},    {"delta_1e2", row.delta_1e2},
                  {"lr", row.lr}};
        stamp(j);
        f << j.dump() << '\n';
    }
    if (rec.has_summary) {
        json j = {{"type", "summary"},
                  {"teacher_accuracy", rec.summary.teacher_accuracy},
                  {"teacher_delta", rec.summary.teacher_delta},
                  {"student_accuracy", rec.summary.student_accuracy},
                  {"sparsity", rec.summary.sparsity},
                  {"method", rec.summary.method}};
        if (rec.summary.ce_weight >= 0) j["ce_weight"] = rec.summary.ce_weight;
        stamp(j);
        f << j.dump() << '\n';
    }
    f.flush();
    if (!f) throw IoError("write failure on '" + path + "'");
}

std::vector<RunRecord> read_run_records(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::vector<RunRecord> out;
    std::map<std::string, std::size_t> index;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError("'" + path + "' line " + std::to_string(lineno) +
                          ": not valid JSON: " + e.what());
        }
        std::string id, type;
        try {
            id = j.at("run_id").get<std::string>();
            type = j.at("type").get<std::string>();
        } catch (const json::exception&) {
            throw IoError("'" + path + "' line " + std::to_string(lineno) +
                          ": missing run_id or type");
        }
        auto it = index.find(id);
        if (it == index.end()) {
            it = index.emplace(id, out.size()).first;
            RunRecord r;
            r.run_id = id;
            r.config_hash = j.value("config_hash", std::string{});
            r.command = j.value("command", std::string{});
            r.seed = j.value("seed", std::uint64_t{0});
            out.push_back(std::move(r));
        }
        RunRecord& rec = out[it->second];
        try {
            if (type == "epoch") {
                EpochRow row;
                row.epoch = j.at("epoch").get<std::size_t>();
                row.split = j.at("split").get<std::string>();
                row.loss = j.at("loss").get<double>();
                row.accuracy = j.at("accuracy").get<double>();
                row.delta = j.value("delta", -1.0);
                row.delta_1e2 = j.value("delta_1e2", -1.0);
                row.lr = j.value("lr", -1.0);
                for (auto it2 = rec.rows.rbegin(); it2 != rec.rows.rend(); ++it2) {
                    if (it2->split != row.split) continue;
                    if (it2->epoch >= row.epoch) {
                        throw IoError("'" + path + "' line " + std::to_string(lineno) +
                                      ": epoch " + std::to_string(row.epoch) + " for split '" +
                                      row.split + "' does not increase (run '" + id + "')");
                    }
                    break;
                }
                rec.rows.push_back(std::move(row));
            } else if (type == "summary") {
                rec.summary.teacher_accuracy = j.value("teacher_accuracy", -1.0);
                rec.summary.teacher_delta = j.value("teacher_delta", -1.0);
                rec.summary.student_accuracy = j.value("student_accuracy", -1.0);
                rec.summary.sparsity = j.value("sparsity", 0.0);
                rec.summary.method = j.value("method", std::string{"none"});
                rec.summary.ce_weight = j.value("ce_weight", -1.0);
                rec.has_summary = true;
            } else {
                throw IoError("'" + path + "' line " + std::to_string(lineno) +
                              ": unknown row type '" + type + "'");
            }
        } catch (const json::exception& e) {
            throw IoError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<RunRecord> read_run_records_dir(const std::string& dir) {
    std::vector<std::string> files;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
        if (entry.path().extension() == ".jsonl") files.push_back(entry.path().string());
    }
    if (ec) throw IoError("cannot list '" + dir + "': " + ec.message());
    std::sort(files.begin(), files.end());
    std::vector<RunRecord> out;
    for (const auto& f : files) {
        auto part = read_run_records(f);
        out.insert(out.end(), std::make_move_iterator(part.begin()),
                   std::make_move_iterator(part.end()));
    }
    return out;
}

std::vector<GridCell> student_accuracy_grid(const std::vector<RunRecord>& records) {
    std::map<std::pair<std::string, double>, std::pair<double, std::size_t>> acc;
    for (const auto& r : records) {
        if (!r.has_summary || r.summary.student_accuracy < 0) continue;
        auto key = std::make_pair(r.summary.method, r.summary.sparsity);
        acc[key].first += r.summary.student_accuracy;
        acc[key].second += 1;
    }
    std::vector<GridCell> grid;
    for (const auto& [key, agg] : acc) {
        GridCell c;
        c.method = key.first;
        c.sparsity = key.second;
        c.mean_student_accuracy = agg.first / static_cast<double>(agg.second);
        c.runs = agg.second;
        grid.push_back(std::move(c));
    }
    return grid;
}

}  // namespace prue
