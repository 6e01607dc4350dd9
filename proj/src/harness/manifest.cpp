#include "dollar/harness/manifest.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>

#include "dollar/error.hpp"
#include "dollar/reward/rewards.hpp"

namespace dollar {

using nlohmann::json;

namespace {

std::string type_name(const json& v) { return v.type_name(); }

/// Walks one JSON object, remembering the keys it consumed so leftovers can
/// be reported as unknown.
class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            fail(path_.empty() ? "<root>" : path_, "expected an object, got " + type_name(j_));
        }
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    [[noreturn]] static void fail(const std::string& field, const std::string& what) {
        throw ConfigError(field + ": " + what);
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void get(const std::string& key, double& out) {
        if (const json* v = find(key)) {
            if (!v->is_number()) {
                fail(at(key), "expected a number, got " + type_name(*v));
            }
            out = v->get<double>();
        }
    }

    template <class I>
        requires std::is_integral_v<I>
    void get(const std::string& key, I& out) {
        if (const json* v = find(key)) {
            if (!v->is_number_integer()) {
                fail(at(key), "expected an integer, got " + type_name(*v));
            }
            if constexpr (std::is_unsigned_v<I>) {
                if (v->is_number_unsigned() || v->get<long long>() >= 0) {
                    out = v->get<I>();
                    return;
                }
                fail(at(key), "must be non-negative");
            } else {
                out = v->get<I>();
            }
        }
    }

    void get(const std::string& key, bool& out) {
        if (const json* v = find(key)) {
            if (!v->is_boolean()) {
                fail(at(key), "expected true or false, got " + type_name(*v));
            }
            out = v->get<bool>();
        }
    }

    void get(const std::string& key, std::string& out) {
        if (const json* v = find(key)) {
            if (!v->is_string()) {
                fail(at(key), "expected a string, got " + type_name(*v));
            }
            out = v->get<std::string>();
        }
    }

    void get(const std::string& key, std::vector<int>& out) {
        if (const json* v = find(key)) {
            out = int_list(*v, at(key));
        }
    }

    void get(const std::string& key, std::vector<std::vector<int>>& out) {
        if (const json* v = find(key)) {
            if (!v->is_array()) {
                fail(at(key), "expected an array of integer arrays");
            }
            out.clear();
            for (std::size_t i = 0; i < v->size(); ++i) {
                out.push_back(int_list((*v)[i], at(key) + "[" + std::to_string(i) + "]"));
            }
        }
    }

    template <class E>
    void get_enum(const std::string& key, E& out, E (*parse)(const std::string&)) {
        if (const json* v = find(key)) {
            if (!v->is_string()) {
                fail(at(key), "expected a string, got " + type_name(*v));
            }
            try {
                out = parse(v->get<std::string>());
            } catch (const ContractViolation& e) {
                fail(at(key), e.what());
            }
        }
    }

    void section(const std::string& key, const std::function<void(Reader&)>& body) {
        if (const json* v = find(key)) {
            Reader r(*v, at(key));
            body(r);
            r.finish();
        }
    }

    void finish() const {
        for (const auto& item : j_.items()) {
            if (!seen_.contains(item.key())) {
                fail(at(item.key()), "unknown field");
            }
        }
    }

private:
    static std::vector<int> int_list(const json& v, const std::string& field) {
        if (!v.is_array()) {
            fail(field, "expected an array of integers");
        }
        std::vector<int> out;
        for (const auto& e : v) {
            if (!e.is_number_integer()) {
                fail(field, "expected an array of integers");
            }
            out.push_back(e.get<int>());
        }
        return out;
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

std::size_t RunManifest::latent_dim() const { return domain == DomainKind::gauss2d ? 2 : codec.latent_dim; }

int RunManifest::num_classes() const {
    return (domain == DomainKind::gauss2d ? gauss2d::kModes : sprites8::kClasses) + 1;
}

DenoiserConfig RunManifest::teacher_model() const {
    DenoiserConfig c;
    c.arch = teacher.arch;
    c.latent_dim = latent_dim();
    c.num_classes = num_classes();
    c.hidden = teacher.hidden;
    c.depth = teacher.depth;
    c.temb_dim = teacher.temb_dim;
    c.class_dim = teacher.class_dim;
    c.kind = teacher.kind;
    c.T = schedule.T;
    c.channels = 4;
    c.side = 2;
    return c;
}

LrmConfig RunManifest::lrm_config() const {
    LrmConfig c;
    c.arch = reward.arch;
    c.latent_dim = latent_dim();
    c.channels = 4;
    c.side = 2;
    c.width = reward.width;
    c.groups = reward.groups;
    c.conditional = reward.conditional;
    c.num_classes = num_classes();
    return c;
}

TeacherTrainConfig RunManifest::teacher_train() const {
    TeacherTrainConfig c = teacher.train;
    c.seed = seeds.teacher;
    return c;
}

CodecConfig RunManifest::codec_config() const {
    CodecConfig c = codec;
    c.seed = seeds.codec;
    return c;
}

FinetuneConfig RunManifest::finetune_config() const {
    FinetuneConfig c;
    c.iters = finetune.iters;
    c.eval_every = finetune.eval_every;
    c.eval_samples = finetune.eval_samples;
    c.seed = seeds.finetune;
    c.eval_seed = seeds.eval;
    return c;
}

RunManifest default_manifest(DomainKind domain) {
    RunManifest m;
    m.domain = domain;
    if (domain == DomainKind::sprites8) {
        m.teacher.train.steps = 30000;
        m.reward.arch = LrmArch::image;
        m.reward.width = 8;
        m.reward.groups = 2;
    }
    m.distill.config.batch = 64;
    return m;
}

RunManifest manifest_from_json(const json& j) {
    Reader root(j, "");
    int version = -1;
    root.get("schema_version", version);
    if (version != kManifestSchema) {
        Reader::fail("schema_version", "expected " + std::to_string(kManifestSchema) + ", got " +
                                           (version < 0 ? std::string("nothing") : std::to_string(version)));
    }
    DomainKind domain = DomainKind::gauss2d;
    root.get_enum("domain", domain, &domain_from_string);
    RunManifest m = default_manifest(domain);
    root.get("name", m.name);
    root.get("out_dir", m.out_dir);

    root.section("schedule", [&](Reader& r) {
        r.get_enum("kind", m.schedule.kind, &schedule_kind_from_string);
        r.get("T", m.schedule.T);
        r.get("s", m.schedule.s);
        r.get("clip_floor", m.schedule.clip_floor);
    });
    root.section("data", [&](Reader& r) {
        r.get("n", m.data.n);
        r.get("heldout", m.data.heldout);
    });
    root.section("codec", [&](Reader& r) {
        r.get("latent_dim", m.codec.latent_dim);
        r.get("decoder_hidden", m.codec.decoder_hidden);
        r.get("steps", m.codec.steps);
        r.get("batch", m.codec.batch);
        r.get("lr", m.codec.lr);
        r.get("dim_fraction", m.codec.dim_fraction);
        r.get("threshold", m.codec.threshold);
    });
    root.section("teacher", [&](Reader& r) {
        r.get_enum("arch", m.teacher.arch, &denoiser_arch_from_string);
        r.get("hidden", m.teacher.hidden);
        r.get("depth", m.teacher.depth);
        r.get("temb_dim", m.teacher.temb_dim);
        r.get("class_dim", m.teacher.class_dim);
        r.get_enum("kind", m.teacher.kind, &param_kind_from_string);
        auto& t = m.teacher.train;
        r.get("steps", t.steps);
        r.get("batch", t.batch);
        r.get("lr", t.lr);
        r.get("cfg_dropout", t.cfg_dropout);
        r.get("cosine_decay", t.cosine_decay);
        r.get("lr_floor", t.lr_floor);
    });
    root.section("distill", [&](Reader& r) {
        auto& c = m.distill.config;
        r.get("beta_vsd", c.beta_vsd);
        r.get("beta_cd", c.beta_cd);
        r.get("beta_ft", c.beta_ft);
        r.get("w_cd", c.w_cd);
        r.get("w_vsd", c.w_vsd);
        r.get("fake_ratio", c.fake_ratio);
        r.get("m", c.m);
        r.get("student_grid", c.student_grid);
        r.get("cd_steps", c.cd_steps);
        r.get("ema_rate", c.ema_rate);
        r.get_enum("grad_mode", c.grad_mode, &grad_mode_from_string);
        r.get_enum("student_kind", c.student_kind, &param_kind_from_string);
        r.get("batch", c.batch);
        r.get("lr_student", c.lr_student);
        r.get("lr_fake", c.lr_fake);
        r.get("vsd_t_lo", c.vsd_t_lo);
        r.get("vsd_t_hi", c.vsd_t_hi);
        r.get("ft_accum", c.ft_accum);
        r.get("ddpo_trunc", c.ddpo_trunc);
        r.get("unconditional", c.unconditional);
        r.section("head", [&](Reader& h) {
            h.get("sigma_d", c.head.sigma_d);
            h.get("time_scale", c.head.time_scale);
            h.get_enum("distance", c.head.distance, &distance_from_string);
            h.get("huber_delta", c.head.huber_delta);
        });
        r.get("iters", m.distill.iters);
        r.get("eval_every", m.distill.eval_every);
        r.get("eval_samples", m.distill.eval_samples);
    });
    root.section("reward", [&](Reader& r) {
        r.get("name", m.reward.name);
        r.get_enum("mode", m.reward.mode, &reward_mode_from_string);
        r.get_enum("arch", m.reward.arch, &lrm_arch_from_string);
        r.get("width", m.reward.width);
        r.get("groups", m.reward.groups);
        r.get("conditional", m.reward.conditional);
        r.get("lr", m.reward.lr);
        r.get("group", m.reward.group);
    });
    root.section("finetune", [&](Reader& r) {
        r.get("iters", m.finetune.iters);
        r.get("eval_every", m.finetune.eval_every);
        r.get("eval_samples", m.finetune.eval_samples);
    });
    root.section("ablate", [&](Reader& r) {
        r.get("grids", m.ablate.grids);
        r.get("m_values", m.ablate.m_values);
        if (const json* v = r.find("kinds")) {
            if (!v->is_array()) {
                Reader::fail(r.at("kinds"), "expected an array of strings");
            }
            m.ablate.kinds.clear();
            for (const auto& e : *v) {
                if (!e.is_string()) {
                    Reader::fail(r.at("kinds"), "expected an array of strings");
                }
                try {
                    m.ablate.kinds.push_back(param_kind_from_string(e.get<std::string>()));
                } catch (const ContractViolation& ex) {
                    Reader::fail(r.at("kinds"), ex.what());
                }
            }
        }
        r.get("iters", m.ablate.iters);
    });
    root.section("eval", [&](Reader& r) {
        r.get("samples", m.eval.samples);
        r.get("teacher_w", m.eval.teacher_w);
        r.get("teacher_steps", m.eval.teacher_steps);
        r.get("timing_trials", m.eval.timing_trials);
        r.get("timing_steps", m.eval.timing_steps);
        r.get("timing_batch", m.eval.timing_batch);
    });
    root.section("seeds", [&](Reader& r) {
        r.get("data", m.seeds.data);
        r.get("codec", m.seeds.codec);
        r.get("teacher", m.seeds.teacher);
        r.get("distill", m.seeds.distill);
        r.get("finetune", m.seeds.finetune);
        r.get("eval", m.seeds.eval);
    });
    root.finish();
    validate(m);
    return m;
}

json manifest_to_json(const RunManifest& m) {
    const auto& c = m.distill.config;
    json kinds = json::array();
    for (ParamKind k : m.ablate.kinds) {
        kinds.push_back(to_string(k));
    }
    return json{
        {"schema_version", m.schema_version},
        {"name", m.name},
        {"domain", to_string(m.domain)},
        {"out_dir", m.out_dir},
        {"schedule",
         {{"kind", to_string(m.schedule.kind)},
          {"T", m.schedule.T},
          {"s", m.schedule.s},
          {"clip_floor", m.schedule.clip_floor}}},
        {"data", {{"n", m.data.n}, {"heldout", m.data.heldout}}},
        {"codec",
         {{"latent_dim", m.codec.latent_dim},
          {"decoder_hidden", m.codec.decoder_hidden},
          {"steps", m.codec.steps},
          {"batch", m.codec.batch},
          {"lr", m.codec.lr},
          {"dim_fraction", m.codec.dim_fraction},
          {"threshold", m.codec.threshold}}},
        {"teacher",
         {{"arch", to_string(m.teacher.arch)},
          {"hidden", m.teacher.hidden},
          {"depth", m.teacher.depth},
          {"temb_dim", m.teacher.temb_dim},
          {"class_dim", m.teacher.class_dim},
          {"kind", to_string(m.teacher.kind)},
          {"steps", m.teacher.train.steps},
          {"batch", m.teacher.train.batch},
          {"lr", m.teacher.train.lr},
          {"cfg_dropout", m.teacher.train.cfg_dropout},
          {"cosine_decay", m.teacher.train.cosine_decay},
          {"lr_floor", m.teacher.train.lr_floor}}},
        {"distill",
         {{"beta_vsd", c.beta_vsd},
          {"beta_cd", c.beta_cd},
          {"beta_ft", c.beta_ft},
          {"w_cd", c.w_cd},
          {"w_vsd", c.w_vsd},
          {"fake_ratio", c.fake_ratio},
          {"m", c.m},
          {"student_grid", c.student_grid},
          {"cd_steps", c.cd_steps},
          {"ema_rate", c.ema_rate},
          {"grad_mode", to_string(c.grad_mode)},
          {"student_kind", to_string(c.student_kind)},
          {"batch", c.batch},
          {"lr_student", c.lr_student},
          {"lr_fake", c.lr_fake},
          {"vsd_t_lo", c.vsd_t_lo},
          {"vsd_t_hi", c.vsd_t_hi},
          {"ft_accum", c.ft_accum},
          {"ddpo_trunc", c.ddpo_trunc},
          {"unconditional", c.unconditional},
          {"head",
           {{"sigma_d", c.head.sigma_d},
            {"time_scale", c.head.time_scale},
            {"distance", to_string(c.head.distance)},
            {"huber_delta", c.head.huber_delta}}},
          {"iters", m.distill.iters},
          {"eval_every", m.distill.eval_every},
          {"eval_samples", m.distill.eval_samples}}},
        {"reward",
         {{"name", m.reward.name},
          {"mode", to_string(m.reward.mode)},
          {"arch", to_string(m.reward.arch)},
          {"width", m.reward.width},
          {"groups", m.reward.groups},
          {"conditional", m.reward.conditional},
          {"lr", m.reward.lr},
          {"group", m.reward.group}}},
        {"finetune",
         {{"iters", m.finetune.iters},
          {"eval_every", m.finetune.eval_every},
          {"eval_samples", m.finetune.eval_samples}}},
        {"ablate",
         {{"grids", m.ablate.grids}, {"m_values", m.ablate.m_values}, {"kinds", kinds}, {"iters", m.ablate.iters}}},
        {"eval",
         {{"samples", m.eval.samples},
          {"teacher_w", m.eval.teacher_w},
          {"teacher_steps", m.eval.teacher_steps},
          {"timing_trials", m.eval.timing_trials},
          {"timing_steps", m.eval.timing_steps},
          {"timing_batch", m.eval.timing_batch}}},
        {"seeds",
         {{"data", m.seeds.data},
          {"codec", m.seeds.codec},
          {"teacher", m.seeds.teacher},
          {"distill", m.seeds.distill},
          {"finetune", m.seeds.finetune},
          {"eval", m.seeds.eval}}},
    };
}

RunManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("manifest: cannot open '" + path + "'");
    }
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw ConfigError("manifest: '" + path + "' is not valid JSON (" + e.what() + ")");
    }
    return manifest_from_json(j);
}

void save_manifest(const std::string& path, const RunManifest& m) {
    std::ofstream out(path);
    require(static_cast<bool>(out), "save_manifest: cannot write '" + path + "'");
    out << manifest_to_json(m).dump(2) << '\n';
}

void validate(const RunManifest& m) {
    auto check = [](bool ok, const std::string& field, const std::string& what) {
        if (!ok) {
            throw ConfigError(field + ": " + what);
        }
    };
    check(!m.name.empty(), "name", "must not be empty");
    check(m.schedule.T >= 2, "schedule.T", "must be at least 2");
    check(m.schedule.kind == ScheduleKind::vp_cosine, "schedule.kind",
          "the conjugate parameterization needs a variance-preserving schedule");
    check(m.data.n >= 16, "data.n", "must be at least 16");
    check(m.data.heldout >= 16, "data.heldout", "must be at least 16");
    check(m.teacher.train.steps >= 0, "teacher.steps", "must be non-negative");
    check(m.teacher.train.batch > 0, "teacher.batch", "must be positive");
    check(m.teacher.train.lr > 0.0, "teacher.lr", "must be positive");
    check(m.teacher.train.cfg_dropout >= 0.0 && m.teacher.train.cfg_dropout <= 1.0, "teacher.cfg_dropout",
          "must be in [0, 1]");
    check(m.teacher.hidden > 0 && m.teacher.depth > 0, "teacher.hidden", "network must be non-empty");
    if (m.domain == DomainKind::sprites8) {
        check(m.codec.latent_dim == 16, "codec.latent_dim", "the 8x8 autoencoder has a 2x2x4 latent (16)");
        check(m.codec.steps >= 0 && m.codec.batch > 0, "codec.steps", "budget must be non-negative");
    } else {
        check(m.teacher.arch == DenoiserArch::mlp, "teacher.arch", "conv needs the sprites8 latent grid");
        check(m.reward.arch != LrmArch::image, "reward.arch", "image needs the sprites8 latent grid");
    }

    const NoiseSchedule sched(m.schedule);
    const auto& c = m.distill.config;
    auto grid_ok = [&](const std::vector<int>& g, const std::string& field) {
        try {
            make_grid(g, sched);
        } catch (const ContractViolation& e) {
            throw ConfigError(field + ": " + e.what());
        }
        check(!g.empty() && g.front() > 0, field, "grid steps must be positive");
    };
    grid_ok(c.student_grid, "distill.student_grid");
    check(c.batch > 0, "distill.batch", "must be positive");
    check(c.fake_ratio >= 1, "distill.fake_ratio", "must be at least 1");
    check(c.m >= 1, "distill.m", "must be at least 1");
    check(c.cd_steps > c.m, "distill.cd_steps", "must exceed m");
    check(c.cd_steps <= m.schedule.T, "distill.cd_steps", "must not exceed T");
    check(c.ema_rate >= 0.0 && c.ema_rate < 1.0, "distill.ema_rate", "must be in [0, 1)");
    check(c.lr_student > 0.0 && c.lr_fake > 0.0, "distill.lr_student", "learning rates must be positive");
    check(0.0 < c.vsd_t_lo && c.vsd_t_lo < c.vsd_t_hi && c.vsd_t_hi < 1.0, "distill.vsd_t_lo",
          "need 0 < vsd_t_lo < vsd_t_hi < 1");
    check(c.ft_accum >= 1, "distill.ft_accum", "must be at least 1");
    check(c.ddpo_trunc >= 1 && static_cast<std::size_t>(c.ddpo_trunc) <= c.student_grid.size(),
          "distill.ddpo_trunc", "must be within [1, student_grid size]");
    check(c.head.sigma_d > 0.0 && c.head.time_scale > 0.0, "distill.head", "sigma_d and time_scale must be positive");
    check(c.head.huber_delta > 0.0, "distill.head.huber_delta", "must be positive");
    check(m.distill.iters >= 0 && m.distill.eval_every >= 0, "distill.iters", "must be non-negative");
    check(m.distill.eval_samples >= 8, "distill.eval_samples", "must be at least 8");

    try {
        make_pixel_reward(m.reward.name, m.domain);
    } catch (const ContractViolation& e) {
        throw ConfigError(std::string("reward.name: ") + e.what());
    }
    check(m.reward.width > 0 && m.reward.groups > 0 && m.reward.width % m.reward.groups == 0, "reward.groups",
          "must divide reward.width");
    check(m.reward.lr > 0.0, "reward.lr", "must be positive");
    check(m.reward.group >= 1, "reward.group", "must be at least 1");
    check(m.finetune.iters >= 0 && m.finetune.eval_every >= 0, "finetune.iters", "must be non-negative");
    check(m.finetune.eval_samples >= 8, "finetune.eval_samples", "must be at least 8");

    check(!m.ablate.grids.empty(), "ablate.grids", "must not be empty");
    for (std::size_t i = 0; i < m.ablate.grids.size(); ++i) {
        grid_ok(m.ablate.grids[i], "ablate.grids[" + std::to_string(i) + "]");
    }
    for (int v : m.ablate.m_values) {
        check(v >= 1 && v < c.cd_steps, "ablate.m_values", "each m must be in [1, cd_steps)");
    }
    check(m.ablate.iters >= 0, "ablate.iters", "must be non-negative");

    check(m.eval.samples >= 8, "eval.samples", "must be at least 8");
    check(m.eval.teacher_steps >= 1 && m.eval.teacher_steps <= m.schedule.T, "eval.teacher_steps",
          "must be in [1, T]");
    check(m.eval.timing_trials == 0 || m.eval.timing_trials >= 2, "eval.timing_trials", "must be 0 (off) or at least 2");
    check(m.eval.timing_batch > 0, "eval.timing_batch", "must be positive");
    for (int n : m.eval.timing_steps) {
        check(n >= 1 && n <= m.schedule.T, "eval.timing_steps", "each step count must be in [1, T]");
    }
}

std::string config_hash(const RunManifest& m) {
    json j = manifest_to_json(m);
    j.erase("out_dir");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
    return buf;
}

void override_seeds(RunManifest& m, std::uint64_t base) {
    m.seeds = {base, base + 1, base + 2, base + 3, base + 4, base + 5};
}

}  // namespace dollar
