#include "dollar/harness/pipelines.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "dollar/error.hpp"
#include "dollar/reward/rewards.hpp"

namespace dollar {

using nlohmann::json;

namespace {

std::ostream& sink(const PipelineOptions& opt) {
    static std::ostream null(nullptr);
    return opt.log != nullptr ? *opt.log : null;
}

fs::path ckpt_path(const fs::path& out, const std::string& name) { return out / "checkpoints" / (name + ".json"); }

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    require(static_cast<bool>(f), "cannot write '" + path.string() + "'");
    f << text;
}

void save_ckpt(const fs::path& out, const std::string& name, Checkpoint ck, const RunManifest& m,
               const std::string& stage) {
    ck.meta["stage"] = stage;
    ck.meta["config_hash"] = config_hash(m);
    fs::create_directories(out / "checkpoints");
    save_checkpoint(ckpt_path(out, name).string(), ck);
}

Checkpoint require_checkpoint(const fs::path& out, const std::string& name, const std::string& stage,
                              const std::string& kind) {
    const fs::path p = ckpt_path(out, name);
    if (!fs::exists(p)) {
        throw StageError("missing " + p.string() + "; run the '" + stage + "' stage first", stage);
    }
    try {
        Checkpoint ck = load_checkpoint(p.string());
        require(ck.kind == kind, "expected a " + kind + " checkpoint, found '" + ck.kind + "'");
        return ck;
    } catch (const ContractViolation& e) {
        throw StageError(p.string() + ": " + e.what() + "; re-run the '" + stage + "' stage", stage);
    } catch (const json::exception& e) {
        throw StageError(p.string() + ": malformed (" + std::string(e.what()) + "); re-run the '" + stage + "' stage",
                         stage);
    }
}

Tensor head_rows(const Tensor& x, std::size_t n) { return x.rows_slice(0, std::min(n, x.rows())); }

Tensor rows_of_class(const Tensor& x, const std::vector<int>& c, int k, std::size_t cap) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < c.size() && idx.size() < cap; ++i) {
        if (c[i] == k) {
            idx.push_back(i);
        }
    }
    Tensor out({idx.size(), x.cols()});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t d = 0; d < x.cols(); ++d) {
            out.at(r, d) = x.at(idx[r], d);
        }
    }
    return out;
}

double mean_of(const Tensor& t) {
    return t.empty() ? 0.0 : std::accumulate(t.values().begin(), t.values().end(), 0.0) / static_cast<double>(t.size());
}

/// Mean of one log column over the trailing fraction of rows.
double tail_mean(const std::vector<DistillLogRow>& log, double DistillLogRow::*field, double frac = 0.1) {
    if (log.empty()) {
        return 0.0;
    }
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(frac * static_cast<double>(log.size())));
    double s = 0.0;
    for (std::size_t i = log.size() - k; i < log.size(); ++i) {
        s += log[i].*field;
    }
    return s / static_cast<double>(k);
}

std::string join(const std::vector<int>& v, char sep) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? std::string(1, sep) : "") + std::to_string(v[i]);
    }
    return s;
}

void log_sample_metrics(MetricLog& log, const std::string& prefix, const SampleMetrics& sm, long iter,
                        bool with_reward) {
    log.add(prefix + "w2", sm.w2, 0.0, iter);
    log.add(prefix + "vendi", sm.vendi, 0.0, iter);
    log.add(prefix + "vendi_pooled", sm.vendi_pooled, 0.0, iter);
    if (with_reward) {
        log.add(prefix + "reward", sm.reward, 0.0, iter);
    }
}

void save_distill(const fs::path& out, const DistillState& s, const RunManifest& m, const std::string& prefix,
                  const std::string& stage) {
    for (auto& [name, ck] : distill_checkpoints(s)) {
        save_ckpt(out, prefix + name, std::move(ck), m, stage);
    }
}

SampleMetrics eval_student(const DistillState& s, const RunData& data, const PixelReward& reward, std::size_t n,
                           std::uint64_t seed) {
    const auto c = sample_classes(n, s.num_real_classes(), s.config.unconditional);
    Rng rng(seed);
    return sample_metrics(student_sample(s, c, rng), c, data, &reward, seed);
}

struct AblateChild {
    std::string family;
    std::string label;
    RunManifest manifest;
};

struct AblateOutcome {
    SampleMetrics metrics;
    double l_cd = 0.0;
    double l_vsd = 0.0;
    bool halted = false;
};

AblateOutcome run_ablate_child(const AblateChild& ch, const std::shared_ptr<const Denoiser>& teacher,
                               const DenoiserModel& init, const RunData& data, const fs::path& dir) {
    const RunManifest& cm = ch.manifest;
    fs::create_directories(dir / "logs");
    save_manifest((dir / "manifest.json").string(), cm);
    const NoiseSchedule sched(cm.schedule);
    DistillState s = make_distill_state(teacher, init, cm.distill.config, sched);
    const DistillResult res =
        distill_loop(s, data.train_latents, nullptr, data.codec, cm.distill.iters, cm.seeds.distill);
    write_text(dir / "curves" / "distill_log.csv", distill_log_csv(res.log));
    const PixelReward reward = make_pixel_reward(cm.reward.name, cm.domain);
    AblateOutcome o;
    o.metrics = eval_student(s, data, reward, cm.distill.eval_samples, cm.seeds.eval);
    o.l_cd = tail_mean(res.log, &DistillLogRow::l_cd);
    o.l_vsd = tail_mean(res.log, &DistillLogRow::l_vsd);
    o.halted = res.halted;
    MetricLog log(dir / "logs" / "metrics.jsonl", config_hash(cm));
    log_sample_metrics(log, "", o.metrics, res.iterations, true);
    log.add("l_cd", o.l_cd, 0.0, res.iterations);
    log.add("l_vsd", o.l_vsd, 0.0, res.iterations);
    log.add("halted", o.halted ? 1.0 : 0.0, 0.0, res.iterations);
    return o;
}

}  // namespace

MetricLog::MetricLog(const fs::path& path, std::string config_hash) : path_(path), hash_(std::move(config_hash)) {
    fs::create_directories(path_.parent_path());
    std::ofstream f(path_, std::ios::trunc);
    require(static_cast<bool>(f), "MetricLog: cannot write '" + path_.string() + "'");
}

void MetricLog::add(const std::string& metric, double value, double std, long iter) {
    rows_.push_back({metric, value, std, hash_, iter});
    std::ofstream f(path_, std::ios::app);
    const json j{{"metric", metric}, {"value", value}, {"std", std}, {"config_hash", hash_}, {"iter", iter}};
    f << j.dump() << '\n';
}

std::vector<MetricRow> read_metric_log(const fs::path& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), "read_metric_log: cannot open '" + path.string() + "'");
    std::vector<MetricRow> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) {
            continue;
        }
        const json j = json::parse(line);
        rows.push_back({j.at("metric").get<std::string>(), j.at("value").get<double>(), j.at("std").get<double>(),
                        j.at("config_hash").get<std::string>(), j.at("iter").get<long>()});
    }
    return rows;
}

std::string file_hash(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), "file_hash: cannot open '" + path.string() + "'");
    std::uint64_t h = 1469598103934665603ULL;
    char ch;
    while (f.get(ch)) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

ToyDataset generate_split(const RunManifest& m, bool heldout) {
    const ToyDataset all = generate(m.domain, m.seeds.data, m.data.n + m.data.heldout);
    return heldout ? all.slice(m.data.n, m.data.n + m.data.heldout) : all.slice(0, m.data.n);
}

RunData load_run_data(const RunManifest& m, const fs::path& out) {
    RunData d;
    d.null_class = m.num_classes() - 1;
    const ToyDataset all = generate(m.domain, m.seeds.data, m.data.n + m.data.heldout);
    d.train = all.slice(0, m.data.n);
    d.heldout = all.slice(m.data.n, m.data.n + m.data.heldout);
    if (m.domain == DomainKind::gauss2d) {
        d.codec = LatentCodec::identity(2);
    } else {
        d.codec = LatentCodec::from_checkpoint(require_checkpoint(out, "codec", "train-codec", "codec"));
        if (!d.codec.usable()) {
            throw StageError("codec held-out MSE " + std::to_string(d.codec.heldout_mse()) + " misses its threshold " +
                                 std::to_string(d.codec.recon_threshold()) + "; re-run the 'train-codec' stage",
                             "train-codec");
        }
        if (d.codec.latent_dim() != m.latent_dim()) {
            throw StageError("codec latent size does not match the manifest; re-run the 'train-codec' stage",
                             "train-codec");
        }
    }
    d.train_latents = {d.codec.encode(d.train.x), d.train.c};
    d.heldout_latents = {d.codec.encode(d.heldout.x), d.heldout.c};
    return d;
}

std::vector<int> cycle_classes(std::size_t n, int k) {
    require(k >= 1, "cycle_classes: need at least one class");
    std::vector<int> c(n);
    for (std::size_t i = 0; i < n; ++i) {
        c[i] = static_cast<int>(i % static_cast<std::size_t>(k));
    }
    return c;
}

std::vector<int> sample_classes(std::size_t n, int k, bool unconditional) {
    return unconditional ? std::vector<int>(n, k) : cycle_classes(n, k);
}

double class_vendi(const Tensor& x, const std::vector<int>& c, const Tensor& ref, const std::vector<int>& ref_c,
                   int null_class) {
    require(x.rows() == c.size() && ref.rows() == ref_c.size(), "class_vendi: one label per row");
    std::map<int, int> present;
    for (int k : c) {
        ++present[k];
    }
    double total = 0.0;
    int used = 0;
    for (const auto& [k, count] : present) {
        if (count < 2) {
            continue;
        }
        const Tensor rk = k == null_class ? head_rows(ref, 512) : rows_of_class(ref, ref_c, k, 512);
        require(rk.rows() >= 2, "class_vendi: class " + std::to_string(k) + " missing from the reference");
        VendiKernel kern;
        kern.kind = KernelKind::rbf;
        kern.sigma = median_bandwidth(rk);
        total += vendi_score(rows_of_class(x, c, k, 512), kern);
        ++used;
    }
    require(used > 0, "class_vendi: no class with two samples");
    return total / used;
}

SampleMetrics sample_metrics(const Tensor& latents, const std::vector<int>& c, const RunData& data,
                             const PixelReward* reward, std::uint64_t seed) {
    const Tensor feats = data.codec.decode(latents);
    const Tensor& ref = data.heldout.x;
    SampleMetrics sm;
    sm.w2 = wasserstein2(feats, ref, 128, seed);
    sm.vendi = class_vendi(feats, c, ref, data.heldout.c, data.null_class);
    VendiKernel pooled;
    pooled.kind = KernelKind::rbf;
    pooled.sigma = median_bandwidth(head_rows(ref, 1024));
    sm.vendi_pooled = vendi_score(head_rows(feats, 1024), pooled);
    if (reward != nullptr && reward->fn) {
        sm.reward = mean_of(reward->evaluate_batch(feats, c));
    }
    return sm;
}

RewardBundle make_reward_bundle(const RunManifest& m, std::uint64_t seed) {
    RewardBundle b;
    b.pixel = make_pixel_reward(m.reward.name, m.domain);
    if (m.reward.group > 1) {
        b.pixel = group_average(b.pixel, m.reward.group);
    }
    b.lrm = LatentRewardModel(m.lrm_config(), seed);
    AdamWConfig oc;
    oc.lr = m.reward.lr;
    b.lrm_opt = AdamW(oc);
    b.mode = m.reward.mode;
    return b;
}

DenoiserModel load_teacher(const fs::path& out) {
    return DenoiserModel::from_checkpoint(require_checkpoint(out, "teacher", "train-teacher", "denoiser"));
}

DistillState load_distill_state(const RunManifest& m, const fs::path& out, const std::string& prefix) {
    const DenoiserModel teacher = load_teacher(out);
    const NoiseSchedule sched(m.schedule);
    DistillState s = make_distill_state(teacher, m.distill.config, sched);
    const std::string stage = prefix.empty() ? "distill" : "finetune";
    auto load = [&](const std::string& role) {
        const Checkpoint ck = require_checkpoint(out, prefix + role, stage, "denoiser");
        DenoiserModel net = DenoiserModel::from_checkpoint(ck);
        if (net.latent_dim() != teacher.latent_dim() || net.num_classes() != teacher.num_classes()) {
            throw StageError(ckpt_path(out, prefix + role).string() + " does not match the teacher; re-run the '" +
                                 stage + "' stage",
                             stage);
        }
        if (ck.meta.contains("iteration")) {
            s.iteration = ck.meta.at("iteration").get<long>();
        }
        return net;
    };
    s.student = load("student");
    s.fake = load("fake");
    s.target = load("target");
    return s;
}

void run_train_codec(const RunManifest& m, const fs::path& out, const PipelineOptions& opt) {
    MetricLog log(out / "logs" / "train-codec.jsonl", config_hash(m));
    if (m.domain == DomainKind::gauss2d) {
        save_ckpt(out, "codec", LatentCodec::identity(2).to_checkpoint(), m, "train-codec");
        log.add("codec_heldout_mse", 0.0);
        sink(opt) << "[train-codec] gauss2d uses the identity codec\n";
        return;
    }
    const ToyDataset train = generate_split(m, false), held = generate_split(m, true);
    const CodecTrainResult r = pretrain_codec(train.x, held.x, m.codec_config());
    save_ckpt(out, "codec", r.codec.to_checkpoint(), m, "train-codec");
    std::ostringstream csv;
    csv << "step,loss\n";
    for (std::size_t i = 0; i < r.losses.size(); ++i) {
        csv << i << ',' << r.losses[i] << '\n';
    }
    write_text(out / "curves" / "codec_loss.csv", csv.str());
    log.add("codec_heldout_mse", r.heldout_mse, 0.0, m.codec.steps);
    log.add("codec_usable", r.usable ? 1.0 : 0.0, 0.0, m.codec.steps);
    log.add("codec_compression", r.codec.compression_factor(), 0.0, m.codec.steps);
    sink(opt) << "[train-codec] held-out mse " << r.heldout_mse << (r.usable ? " (usable)\n" : " (NOT usable)\n");
    if (!r.usable) {
        throw NumericalError("codec held-out MSE " + std::to_string(r.heldout_mse) + " misses the threshold " +
                             std::to_string(m.codec.threshold));
    }
}

void run_train_teacher(const RunManifest& m, const fs::path& out, const PipelineOptions& opt) {
    const RunData data = load_run_data(m, out);
    MetricLog log(out / "logs" / "train-teacher.jsonl", config_hash(m));
    const NoiseSchedule sched(m.schedule);
    DenoiserModel teacher(m.teacher_model(), m.seeds.teacher);
    const TeacherTrainConfig tc = m.teacher_train();
    const auto losses = train_denoiser(teacher, data.train_latents, sched, tc, [&](int step, double loss) {
        if ((step + 1) % 2000 == 0) {
            sink(opt) << "[train-teacher] step " << step + 1 << "/" << tc.steps << " loss " << loss << '\n';
        }
    });
    save_ckpt(out, "teacher", teacher.to_checkpoint(), m, "train-teacher");

    std::ostringstream csv;
    csv << "step,loss\n";
    const std::size_t block = 100;
    for (std::size_t b = 0; b * block < losses.size(); ++b) {
        const std::size_t e = std::min(losses.size(), (b + 1) * block);
        csv << e << ',' << std::accumulate(losses.begin() + b * block, losses.begin() + e, 0.0) / (e - b * block)
            << '\n';
    }
    write_text(out / "curves" / "teacher_loss.csv", csv.str());
    if (!losses.empty()) {
        const std::size_t k = std::min<std::size_t>(1000, losses.size());
        const Summary tail = summarize(std::vector<double>(losses.end() - k, losses.end()));
        log.add("teacher_loss", tail.mean, tail.std, tc.steps);
    }

    const auto c = sample_classes(m.eval.samples, m.num_classes() - 1, m.distill.config.unconditional);
    Rng rng(m.seeds.eval);
    const Tensor x = ddim_sample(teacher, c, m.eval.teacher_w, ddim_grid(sched, m.eval.teacher_steps), sched, rng);
    const PixelReward reward = make_pixel_reward(m.reward.name, m.domain);
    const SampleMetrics sm = sample_metrics(x, c, data, &reward, m.seeds.eval);
    log_sample_metrics(log, "teacher_", sm, tc.steps, true);
    sink(opt) << "[train-teacher] w2 " << sm.w2 << " vendi " << sm.vendi << '\n';
}

void run_distill(const RunManifest& m, const fs::path& out, const PipelineOptions& opt) {
    const RunData data = load_run_data(m, out);
    const DenoiserModel teacher = load_teacher(out);
    const NoiseSchedule sched(m.schedule);
    DistillState s = make_distill_state(teacher, m.distill.config, sched);
    MetricLog log(out / "logs" / "distill.jsonl", config_hash(m));
    const PixelReward reward = make_pixel_reward(m.reward.name, m.domain);

    auto evaluate = [&](const DistillState& st, long iter) {
        const SampleMetrics sm = eval_student(st, data, reward, m.distill.eval_samples, m.seeds.eval);
        log_sample_metrics(log, "", sm, iter, true);
        sink(opt) << "[distill] iter " << iter << " w2 " << sm.w2 << " vendi " << sm.vendi << '\n';
    };
    DistillHooks hooks;
    hooks.every = m.distill.eval_every;
    hooks.on_eval = evaluate;
    const DistillResult res =
        distill_loop(s, data.train_latents, nullptr, data.codec, m.distill.iters, m.seeds.distill, hooks);
    if (m.distill.eval_every == 0 || m.distill.iters == 0) {
        evaluate(s, s.iteration);
    }
    save_distill(out, s, m, "", "distill");
    write_text(out / "curves" / "distill_log.csv", distill_log_csv(res.log));
    log.add("l_vsd", tail_mean(res.log, &DistillLogRow::l_vsd), 0.0, res.iterations);
    log.add("l_cd", tail_mean(res.log, &DistillLogRow::l_cd), 0.0, res.iterations);
    log.add("fake_loss", tail_mean(res.log, &DistillLogRow::fake_loss), 0.0, res.iterations);
    log.add("halted", res.halted ? 1.0 : 0.0, 0.0, res.iterations);
    if (res.halted) {
        throw NumericalError("distill halted at iteration " + std::to_string(res.iterations) + ": " + res.halt_reason);
    }
}

void run_finetune(const RunManifest& m, const fs::path& out, const PipelineOptions& opt) {
    if (m.reward.mode == RewardMode::none) {
        throw ConfigError("reward.mode: 'none' leaves nothing to fine-tune (use lrm or ddpo)");
    }
    const RunData data = load_run_data(m, out);
    const DistillState start = load_distill_state(m, out);
    const RewardBundle bundle = make_reward_bundle(m, m.seeds.finetune);
    MetricLog log(out / "logs" / "finetune.jsonl", config_hash(m));

    DistillState fin = start;
    RewardBundle trained = bundle;
    const FinetuneRun run =
        finetune_run(start, bundle, m.reward.mode, data.codec, data.train_latents, m.finetune_config(), &fin, &trained);
    const std::string mode = to_string(m.reward.mode);
    write_text(out / "curves" / ("finetune_" + mode + ".csv"), finetune_curve_csv(run));
    write_text(out / "curves" / ("finetune_" + mode + "_log.csv"), distill_log_csv(run.result.log));
    for (const auto& p : run.curve) {
        log.add("reward_true", p.reward_true, 0.0, p.iter);
        if (m.reward.mode == RewardMode::lrm) {
            log.add("reward_pred", p.reward_pred, 0.0, p.iter);
        }
        log.add("w2_latent", p.w2, 0.0, p.iter);
    }
    const long last = run.curve.empty() ? 0 : run.curve.back().iter;
    log.add("data_reward", data_reward_mean(bundle.pixel, data.codec, data.heldout_latents), 0.0, last);
    if (m.reward.mode == RewardMode::lrm) {
        log.add("lrm_heldout_mse",
                lrm_eval_mse(trained.lrm, bundle.pixel, data.codec, data.heldout_latents.x, data.heldout_latents.c),
                0.0, last);
        Checkpoint ck;
        ck.kind = "lrm";
        ck.tensors = snapshot(trained.lrm.parameter_names(), trained.lrm.parameters());
        ck.meta["steps_trained"] = trained.lrm.steps_trained;
        save_ckpt(out, "lrm", std::move(ck), m, "finetune");
    }
    const SampleMetrics sm = eval_student(fin, data, bundle.pixel, m.distill.eval_samples, m.seeds.eval);
    log_sample_metrics(log, "finetuned_", sm, last, true);
    log.add("halted", run.result.halted ? 1.0 : 0.0, 0.0, last);
    save_distill(out, fin, m, "finetuned_", "finetune");
    sink(opt) << "[finetune] " << mode << " reward " << run.curve.front().reward_true << " -> " << run.final_reward
              << ", w2 " << sm.w2 << '\n';
    if (run.result.halted) {
        throw NumericalError("finetune halted: " + run.result.halt_reason);
    }
}

void run_ablate(const RunManifest& m, const fs::path& out, const PipelineOptions& opt) {
    const RunData data = load_run_data(m, out);
    const DenoiserModel teacher = load_teacher(out);
    const std::shared_ptr<const Denoiser> teacher_ptr = std::make_shared<const DenoiserModel>(teacher);

    std::vector<AblateChild> children;
    auto child = [&](const std::string& family, const std::string& label, auto&& edit) {
        AblateChild ch{family, label, m};
        ch.manifest.name = m.name + "/" + family + "_" + label;
        ch.manifest.distill.iters = m.ablate.iters;
        edit(ch.manifest.distill.config);
        auto& cfg = ch.manifest.distill.config;
        cfg.ddpo_trunc = std::min<int>(cfg.ddpo_trunc, static_cast<int>(cfg.student_grid.size()));
        // Each child's seed is derived from its own manifest.
        ch.manifest.seeds.distill = std::stoull(config_hash(ch.manifest), nullptr, 16) >> 16;
        children.push_back(std::move(ch));
    };
    for (const auto& g : m.ablate.grids) {
        child("grid", join(g, '-'), [&](DistillConfig& c) { c.student_grid = g; });
    }
    for (int mv : m.ablate.m_values) {
        child("m", std::to_string(mv), [&](DistillConfig& c) { c.m = mv; });
    }
    for (ParamKind k : m.ablate.kinds) {
        child("kind", to_string(k), [&](DistillConfig& c) { c.student_kind = k; });
    }

    std::vector<AblateOutcome> outcomes(children.size());
    const std::size_t width = static_cast<std::size_t>(std::max(1, opt.threads));
    for (std::size_t b = 0; b < children.size(); b += width) {
        std::vector<std::future<AblateOutcome>> batch;
        for (std::size_t i = b; i < std::min(children.size(), b + width); ++i) {
            const fs::path dir = out / "ablate" / (children[i].family + "_" + children[i].label);
            sink(opt) << "[ablate] " << children[i].family << " = " << children[i].label << '\n';
            batch.push_back(std::async(width > 1 ? std::launch::async : std::launch::deferred, [&, i, dir] {
                return run_ablate_child(children[i], teacher_ptr, teacher, data, dir);
            }));
        }
        for (std::size_t i = 0; i < batch.size(); ++i) {
            outcomes[b + i] = batch[i].get();
        }
    }

    std::map<std::string, std::ostringstream> csv;
    MetricLog log(out / "logs" / "ablate.jsonl", config_hash(m));
    for (std::size_t i = 0; i < children.size(); ++i) {
        const auto& ch = children[i];
        const auto& o = outcomes[i];
        auto& os = csv[ch.family];
        if (os.tellp() == 0) {
            os << "label,w2,vendi,vendi_pooled,l_cd,l_vsd,halted\n";
        }
        os << ch.label << ',' << o.metrics.w2 << ',' << o.metrics.vendi << ',' << o.metrics.vendi_pooled << ','
           << o.l_cd << ',' << o.l_vsd << ',' << (o.halted ? 1 : 0) << '\n';
        const std::string key = ch.family + "=" + ch.label + ".";
        log.add(key + "w2", o.metrics.w2, 0.0, m.ablate.iters);
        log.add(key + "vendi", o.metrics.vendi, 0.0, m.ablate.iters);
        log.add(key + "l_cd", o.l_cd, 0.0, m.ablate.iters);
        sink(opt) << "[ablate] " << ch.family << " = " << ch.label << ": w2 " << o.metrics.w2 << " vendi "
                  << o.metrics.vendi << '\n';
    }
    for (auto& [family, os] : csv) {
        write_text(out / "curves" / ("ablate_" + family + ".csv"), os.str());
    }
}

void run_eval(const RunManifest& m, const fs::path& out, const PipelineOptions& opt) {
    const RunData data = load_run_data(m, out);
    const DenoiserModel teacher = load_teacher(out);
    const DistillState student = load_distill_state(m, out);
    const NoiseSchedule sched(m.schedule);
    const PixelReward reward = make_pixel_reward(m.reward.name, m.domain);
    MetricLog log(out / "logs" / "eval.jsonl", config_hash(m));
    const auto c = sample_classes(m.eval.samples, m.num_classes() - 1, m.distill.config.unconditional);

    auto emit = [&](const std::string& who, const Tensor& x) {
        const SampleMetrics sm = sample_metrics(x, c, data, &reward, m.seeds.eval);
        log_sample_metrics(log, who + ".", sm, 0, true);
        sink(opt) << "[eval] " << who << ": w2 " << sm.w2 << " vendi " << sm.vendi << " reward " << sm.reward << '\n';
        if (m.domain == DomainKind::gauss2d) {
            std::ostringstream os;
            os << "x,y,c\n";
            for (std::size_t i = 0; i < x.rows(); ++i) {
                os << x.at(i, 0) << ',' << x.at(i, 1) << ',' << c[i] << '\n';
            }
            write_text(out / "curves" / ("samples_" + who + ".csv"), os.str());
        }
    };
    {
        Rng rng(m.seeds.eval);
        emit("teacher", ddim_sample(teacher, c, m.eval.teacher_w, ddim_grid(sched, m.eval.teacher_steps), sched, rng));
    }
    {
        Rng rng(m.seeds.eval);
        emit("student", student_sample(student, c, rng));
    }
    if (fs::exists(ckpt_path(out, "finetuned_student"))) {
        const DistillState fin = load_distill_state(m, out, "finetuned_");
        Rng rng(m.seeds.eval);
        emit("finetuned", student_sample(fin, c, rng));
    }

    if (m.eval.timing_trials > 0) {
        const auto tc = sample_classes(m.eval.timing_batch, m.num_classes() - 1, m.distill.config.unconditional);
        DistillState probe = student;
        const GridSampler sampler = [&](const TimeGrid& g) {
            Rng rng(m.seeds.eval);
            if (static_cast<int>(g.size()) == m.eval.teacher_steps) {
                return ddim_sample(teacher, tc, m.eval.teacher_w, g, sched, rng);
            }
            probe.student_grid = g;
            return student_sample(probe, tc, rng);
        };
        std::vector<TimeGrid> grids;
        for (int n : m.eval.timing_steps) {
            grids.push_back(ddim_grid(sched, n));
        }
        TensorMap decode;
        if (m.domain == DomainKind::sprites8) {
            decode = [&](const Tensor& z) { return data.codec.decode(z); };
        }
        const auto rows = timing_report(sampler, grids, m.eval.timing_trials, decode);
        std::ostringstream os;
        os << "steps,diffusion_ms,diffusion_std_ms,total_ms,total_std_ms,diffusion_pct,total_pct\n";
        for (const auto& r : rows) {
            const std::string key = "timing.steps=" + std::to_string(r.steps) + ".";
            log.add(key + "diffusion_ms", r.diffusion_ms, r.diffusion_std_ms);
            log.add(key + "total_ms", r.total_ms, r.total_std_ms);
            log.add(key + "diffusion_pct", r.diffusion_pct);
            os << r.steps << ',' << r.diffusion_ms << ',' << r.diffusion_std_ms << ',' << r.total_ms << ','
               << r.total_std_ms << ',' << r.diffusion_pct << ',' << r.total_pct << '\n';
        }
        write_text(out / "curves" / "timing.csv", os.str());
        sink(opt) << format_timing(rows);
    }
}

void run_report(const RunManifest& m, const fs::path& out, const PipelineOptions& opt) {
    if (!fs::exists(out)) {
        throw StageError("nothing to report under " + out.string() + "; run a pipeline stage first", "train-teacher");
    }
    std::vector<fs::path> logs, curves;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
        if (!e.is_regular_file()) {
            continue;
        }
        if (e.path().extension() == ".jsonl") {
            logs.push_back(e.path());
        } else if (e.path().extension() == ".csv") {
            curves.push_back(e.path());
        }
    }
    std::sort(logs.begin(), logs.end());
    std::sort(curves.begin(), curves.end());
    if (logs.empty()) {
        throw StageError("no metric logs under " + out.string() + "; run a pipeline stage first", "train-teacher");
    }

    std::ostringstream md;
    md << "# " << m.name << "\n\nconfig " << config_hash(m) << "\n";
    md << std::setprecision(6);
    for (const auto& p : logs) {
        const auto rows = read_metric_log(p);
        // Last row per metric, in first-seen order.
        std::vector<std::string> order;
        std::map<std::string, std::pair<MetricRow, int>> last;
        for (const auto& r : rows) {
            auto it = last.find(r.metric);
            if (it == last.end()) {
                order.push_back(r.metric);
                last.emplace(r.metric, std::make_pair(r, 1));
            } else {
                it->second = {r, it->second.second + 1};
            }
        }
        md << "\n## " << fs::relative(p, out).generic_string() << "\n\n";
        md << "| metric | iter | value | std | rows |\n|---|---|---|---|---|\n";
        for (const auto& k : order) {
            const auto& [r, n] = last.at(k);
            md << "| " << k << " | " << r.iter << " | " << r.value << " | " << r.std << " | " << n << " |\n";
        }
    }
    write_text(out / "report.md", md.str());

    json recipe = json::array();
    for (const auto& p : curves) {
        std::ifstream f(p);
        std::string header;
        std::getline(f, header);
        std::vector<std::string> cols;
        std::stringstream ss(header);
        for (std::string col; std::getline(ss, col, ',');) {
            cols.push_back(col);
        }
        if (cols.size() < 2) {
            continue;
        }
        const std::string name = p.stem().string();
        const bool scatter = name.rfind("samples_", 0) == 0;
        json item{{"file", fs::relative(p, out).generic_string()},
                  {"kind", scatter ? "scatter" : (name.rfind("ablate_", 0) == 0 ? "bar" : "line")},
                  {"x", cols[0]}};
        json ys = json::array();
        for (std::size_t i = 1; i < cols.size(); ++i) {
            if (!(scatter && cols[i] == "c")) {
                ys.push_back(cols[i]);
            }
        }
        item["y"] = ys;
        if (scatter) {
            item["color"] = "c";
        }
        recipe.push_back(item);
    }
    write_text(out / "plot_recipe.json", recipe.dump(2) + "\n");
    sink(opt) << md.str();
}

const std::vector<std::string>& pipeline_commands() {
    static const std::vector<std::string> cmds{"train-codec", "train-teacher", "distill", "finetune",
                                               "ablate",      "eval",          "report"};
    return cmds;
}

void run_pipeline(const std::string& command, const RunManifest& m, const fs::path& out,
                  const PipelineOptions& opt) {
    using Fn = void (*)(const RunManifest&, const fs::path&, const PipelineOptions&);
    static const std::map<std::string, Fn> table{
        {"train-codec", &run_train_codec}, {"train-teacher", &run_train_teacher}, {"distill", &run_distill},
        {"finetune", &run_finetune},       {"ablate", &run_ablate},               {"eval", &run_eval},
        {"report", &run_report}};
    const auto it = table.find(command);
    if (it == table.end()) {
        throw ConfigError("unknown command '" + command + "'");
    }
    fs::create_directories(out);
    if (command != "report") {
        save_manifest((out / "manifest.json").string(), m);
    }
    it->second(m, out, opt);
}

fs::path resolve_out_dir(const RunManifest& m, const std::optional<std::string>& out_flag, const char* root) {
    fs::path p = out_flag ? fs::path(*out_flag) : fs::path(m.out_dir);
    if (p.is_relative() && root != nullptr && *root != '\0') {
        p = fs::path(root) / p;
    }
    return p;
}

}  // namespace dollar
