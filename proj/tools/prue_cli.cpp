// prue: train / prune / distill / measure experiment pipelines from one JSON
// config. Every run writes a checkpoint and/or JSONL metrics under the output
// directory; the sweep subcommand expands method x sparsity x seed into
// separate child processes of this same binary.
//
// Exit codes: 0 success, 2 config/validation, 3 IO, 4 numeric failure.

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "prue/config.hpp"
#include "prue/errors.hpp"
#include "prue/pipeline.hpp"
#include "prue/pruning.hpp"

namespace {

using prue::ConfigError;
using prue::IoError;

struct LoadedConfig {
    prue::ExperimentConfig cfg;
    std::string out_dir;  // resolved: --out > config file key > PRUE_OUT_DIR > struct default
};

LoadedConfig load_config(const std::string& path, const std::string& out_flag) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    LoadedConfig out;
    bool file_has_out_dir = j.contains("out_dir");
    out.cfg = prue::ExperimentConfig::from_json(j);
    if (!out_flag.empty()) {
        out.out_dir = out_flag;
    } else if (file_has_out_dir) {
        out.out_dir = out.cfg.out_dir;
    } else if (const char* env = std::getenv("PRUE_OUT_DIR"); env && *env) {
        out.out_dir = env;
    } else {
        out.out_dir = out.cfg.out_dir;
    }
    return out;
}

std::vector<std::string> split_csv(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    for (char c : text) {
        if (c == ',') {
            out.push_back(item);
            item.clear();
        } else {
            item += c;
        }
    }
    if (!item.empty() || !out.empty()) out.push_back(item);
    return out;
}

std::vector<int> parse_classes(const std::string& text) {
    std::vector<int> out;
    if (text.empty()) return out;
    for (const auto& item : split_csv(text)) {
        std::size_t used = 0;
        int v = 0;
        try {
            v = std::stoi(item, &used);
        } catch (const std::exception&) {
            throw ConfigError("class list entry '" + item + "' is not an integer");
        }
        if (used != item.size()) {
            throw ConfigError("class list entry '" + item + "' is not an integer");
        }
        out.push_back(v);
    }
    return out;
}

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') {
            out += "'\\''";
        } else {
            out += c;
        }
    }
    out += "'";
    return out;
}

// Runs this same binary with the given arguments; returns the child's exit
// code (or 128+signal if it died on one).
int run_child(const std::vector<std::string>& args) {
    std::error_code ec;
    auto exe = std::filesystem::read_symlink("/proc/self/exe", ec);
    if (ec) throw IoError("cannot resolve own binary path: " + ec.message());
    std::string cmd = shell_quote(exe.string());
    for (const auto& a : args) cmd += " " + shell_quote(a);
    std::printf("+ %s\n", cmd.c_str());
    std::fflush(stdout);
    int rc = std::system(cmd.c_str());
    if (rc == -1) throw IoError("failed to spawn child process");
    if (WIFEXITED(rc)) return WEXITSTATUS(rc);
    if (WIFSIGNALED(rc)) return 128 + WTERMSIG(rc);
    return 1;
}

void print_grid(const std::vector<prue::RunRecord>& records) {
    auto grid = prue::student_accuracy_grid(records);
    if (grid.empty()) {
        std::printf("no student summaries found\n");
        return;
    }
    std::set<double> sparsities;
    std::set<std::string> methods;
    std::map<std::pair<std::string, double>, prue::GridCell> cells;
    for (const auto& cell : grid) {
        sparsities.insert(cell.sparsity);
        methods.insert(cell.method);
        cells[{cell.method, cell.sparsity}] = cell;
    }
    std::printf("\nmean student accuracy (runs averaged per cell)\n");
    std::printf("%-12s", "method");
    for (double s : sparsities) std::printf(" %9s", prue::sparsity_tag(s).c_str());
    std::printf("\n");
    for (const auto& m : methods) {
        std::printf("%-12s", m.c_str());
        for (double s : sparsities) {
            auto it = cells.find({m, s});
            if (it == cells.end()) {
                std::printf(" %9s", "-");
            } else {
                std::printf(" %9.4f", it->second.mean_student_accuracy);
            }
        }
        std::printf("\n");
    }
}

int cmd_sweep(const LoadedConfig& lc, const std::string& config_path,
              const std::string& methods_csv) {
    const auto& cfg = lc.cfg;
    std::vector<prue::ScoreMethod> methods;
    if (methods_csv.empty()) {
        methods.push_back(cfg.pruning.method);
    } else {
        for (const auto& name : split_csv(methods_csv)) {
            methods.push_back(prue::score_method_from_string(name));
        }
    }
    std::string hash = prue::config_hash(cfg);
    bool dense_cell = false;
    std::vector<double> nonzero;
    for (double s : cfg.pruning.sparsities) {
        if (s == 0.0) {
            dense_cell = true;
        } else {
            nonzero.push_back(s);
        }
    }

    auto seed_arg = [](std::uint64_t s) { return std::to_string(s); };
    for (std::uint64_t seed : cfg.seeds) {
        std::string teacher_ckpt = prue::checkpoint_path(
            lc.out_dir, prue::teacher_run_id(cfg.teacher_arch, seed, hash));
        std::vector<std::vector<std::string>> steps;
        steps.push_back({"train", "--config", config_path, "--role", "teacher", "--seed",
                         seed_arg(seed), "--out", lc.out_dir});
        steps.push_back({"train", "--config", config_path, "--role", "student-vanilla", "--seed",
                         seed_arg(seed), "--out", lc.out_dir});
        if (dense_cell) {
            steps.push_back({"distill", "--config", config_path, "--teacher", teacher_ckpt,
                             "--seed", seed_arg(seed), "--out", lc.out_dir});
        }
        for (auto method : methods) {
            for (double s : nonzero) {
                char sbuf[32];
                std::snprintf(sbuf, sizeof sbuf, "%.17g", s);
                steps.push_back({"prune", "--config", config_path, "--checkpoint", teacher_ckpt,
                                 "--method", prue::to_string(method), "--sparsity", sbuf,
                                 "--seed", seed_arg(seed), "--out", lc.out_dir});
                std::string pruned = prue::checkpoint_path(
                    lc.out_dir, prue::prune_run_id(cfg.teacher_arch, method, s, seed, hash));
                steps.push_back({"distill", "--config", config_path, "--teacher", pruned,
                                 "--seed", seed_arg(seed), "--out", lc.out_dir});
            }
        }
        for (const auto& step : steps) {
            int rc = run_child(step);
            if (rc != 0) {
                std::fprintf(stderr, "sweep: step '%s' failed with exit code %d\n",
                             step[0].c_str(), rc);
                return rc;
            }
        }
    }
    print_grid(prue::read_run_records_dir(lc.out_dir));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"training, pruning and distillation pipelines driven by one JSON config"};
    app.require_subcommand(1);

    std::string config_path, out_flag, role = "teacher", split, mode = "two-pass";
    std::string ckpt, method_flag, sparsity_flag, classes_flag, methods_flag, csv_path;
    std::uint64_t seed = 0;
    std::size_t epochs_flag = 0, finetune_flag = 0, batchsize = 256;
    double smoothing_flag = -1, tau_flag = 0, lambda_flag = -1;

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "experiment config JSON")->required();
        c->add_option("--out", out_flag, "output directory (overrides config and PRUE_OUT_DIR)");
    };

    auto* t = app.add_subcommand("train", "train a teacher or a hard-label student");
    add_common(t);
    t->add_option("--role", role, "teacher | student-vanilla");
    auto* t_seed = t->add_option("--seed", seed, "run seed (default: first config seed)");
    auto* t_smooth = t->add_option("--smoothing", smoothing_flag, "label smoothing override");
    auto* t_epochs = t->add_option("--epochs", epochs_flag, "epoch count override");

    auto* u = app.add_subcommand("uncertainty", "measure prediction variance delta on one split");
    add_common(u);
    u->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    u->add_option("--split", split, "train | val (default train)");
    u->add_option("--mode", mode, "direct | two-pass");
    u->add_option("--batchsize", batchsize, "evaluation batch size");

    auto* p = app.add_subcommand("prune", "score, mask and fine-tune a trained teacher");
    add_common(p);
    p->add_option("--checkpoint", ckpt, "dense teacher checkpoint")->required();
    p->add_option("--method", method_flag, "prue | magnitude | snip | random");
    p->add_option("--sparsity", sparsity_flag, "fraction or percentage, e.g. 0.5 or 50%");
    auto* p_seed = p->add_option("--seed", seed, "run seed (default: first config seed)");
    auto* p_ft = p->add_option("--finetune-epochs", finetune_flag, "fine-tune epoch override");

    auto* d = app.add_subcommand("distill", "train a student against a teacher's soft labels");
    add_common(d);
    d->add_option("--teacher", ckpt, "teacher checkpoint")->required();
    auto* d_seed = d->add_option("--seed", seed, "run seed (default: first config seed)");
    auto* d_tau = d->add_option("--tau", tau_flag, "softening temperature override");
    auto* d_lambda = d->add_option("--lambda", lambda_flag, "soft-label weight override");
    auto* d_epochs = d->add_option("--epochs", epochs_flag, "distillation epoch override");

    auto* e = app.add_subcommand("eval", "accuracy and mean loss on one split");
    add_common(e);
    e->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    e->add_option("--split", split, "train | val (default val)");

    auto* dp = app.add_subcommand("dump-predictions", "softmax outputs as CSV for projection");
    add_common(dp);
    dp->add_option("--checkpoint", ckpt, "model checkpoint")->required();
    dp->add_option("--split", split, "train | val (default train)");
    dp->add_option("--classes", classes_flag, "comma-separated class ids (default: all)");
    dp->add_option("output", csv_path, "CSV output path")->required();

    auto* sw = app.add_subcommand("sweep", "expand method x sparsity x seed into child runs");
    add_common(sw);
    sw->add_option("--methods", methods_flag, "comma-separated methods (default: config method)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    }

    try {
        LoadedConfig lc = load_config(config_path, out_flag);
        auto& cfg = lc.cfg;

        // Value overrides are semantic, so they land in the config before
        // hashing; selection flags (seed, method, sparsity, split) do not.
        if (t->parsed()) {
            if (t_smooth->count()) cfg.training.smoothing_alpha = smoothing_flag;
            if (t_epochs->count()) cfg.training.epochs = epochs_flag;
            cfg.validate();
            if (!t_seed->count()) seed = cfg.seeds.front();
            prue::run_train_role(cfg, prue::config_hash(cfg), role, seed, lc.out_dir);
        } else if (u->parsed()) {
            if (split.empty()) split = "train";
            prue::run_uncertainty(cfg, prue::config_hash(cfg), ckpt, split, mode, batchsize,
                                  lc.out_dir);
        } else if (p->parsed()) {
            if (p_ft->count()) cfg.pruning.finetune_epochs = finetune_flag;
            cfg.validate();
            if (!p_seed->count()) seed = cfg.seeds.front();
            auto method = method_flag.empty() ? cfg.pruning.method
                                              : prue::score_method_from_string(method_flag);
            double s = sparsity_flag.empty() ? cfg.pruning.sparsities.front()
                                             : prue::parse_sparsity(sparsity_flag);
            prue::run_prune(cfg, prue::config_hash(cfg), ckpt, method, s, seed, lc.out_dir);
        } else if (d->parsed()) {
            if (d_tau->count()) cfg.distill.tau = tau_flag;
            if (d_lambda->count()) cfg.distill.lambda = lambda_flag;
            if (d_epochs->count()) cfg.distill.epochs = epochs_flag;
            cfg.validate();
            if (!d_seed->count()) seed = cfg.seeds.front();
            prue::run_distill(cfg, prue::config_hash(cfg), ckpt, seed, lc.out_dir);
        } else if (e->parsed()) {
            if (split.empty()) split = "val";
            prue::run_eval(cfg, prue::config_hash(cfg), ckpt, split, lc.out_dir);
        } else if (dp->parsed()) {
            if (split.empty()) split = "train";
            auto classes = parse_classes(classes_flag);
            std::size_t rows = prue::run_dump_predictions(cfg, ckpt, split, classes, csv_path);
            std::printf("wrote %zu rows to %s\n", rows, csv_path.c_str());
        } else if (sw->parsed()) {
            return cmd_sweep(lc, config_path, methods_flag);
        }
        return 0;
    } catch (const prue::ConfigError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 2;
    } catch (const prue::ShapeError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 2;
    } catch (const prue::IoError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 3;
    } catch (const prue::NumericError& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 4;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 1;
    }
}
