#include "dollar/distill/distill.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "dollar/error.hpp"
#include "dollar/reward/finetune.hpp"

namespace dollar {

namespace {

std::vector<int> repeat(int t, std::size_t n) { return std::vector<int>(n, t); }

std::vector<Var> all_params(const DistillState& s, const RewardBundle* reward) {
    std::vector<Var> p = s.student.parameters();
    for (const auto* net : {&s.fake, &s.target}) {
        const auto q = net->parameters();
        p.insert(p.end(), q.begin(), q.end());
    }
    if (reward != nullptr) {
        const auto q = reward->lrm.parameters();
        p.insert(p.end(), q.begin(), q.end());
    }
    return p;
}

Tensor scaled(Tensor t, double k) {
    for (auto& v : t.values()) {
        v *= k;
    }
    return t;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

std::string to_string(Distance d) { return d == Distance::mse ? "mse" : "huber"; }

Distance distance_from_string(const std::string& s) {
    if (s == "mse") {
        return Distance::mse;
    }
    if (s == "huber") {
        return Distance::huber;
    }
    throw ContractViolation("unknown distance '" + s + "' (expected mse or huber)");
}

std::string to_string(GradMode m) {
    switch (m) {
        case GradMode::none:
            return "none";
        case GradMode::last_step:
            return "last-step";
        case GradMode::one_random_step:
            return "one-random-step";
    }
    return "none";
}

GradMode grad_mode_from_string(const std::string& s) {
    if (s == "none") {
        return GradMode::none;
    }
    if (s == "last-step") {
        return GradMode::last_step;
    }
    if (s == "one-random-step") {
        return GradMode::one_random_step;
    }
    throw ContractViolation("unknown grad mode '" + s + "' (expected none, last-step or one-random-step)");
}

double ConsistencyHead::c_skip(int t) const {
    const double tau = (t - t_min) * time_scale;
    return sigma_d * sigma_d / (tau * tau + sigma_d * sigma_d);
}

double ConsistencyHead::c_out(int t) const {
    const double tau = (t - t_min) * time_scale;
    return tau / std::sqrt(tau * tau + sigma_d * sigma_d);
}

Var ConsistencyHead::distance_loss(const Var& a, const Var& b) const {
    require(a.shape() == b.shape(), "distance_loss: shape mismatch");
    return distance == Distance::mse ? ops::mean(ops::square(a - b)) : ops::mean(ops::huber(a - b, huber_delta));
}

Var consistency_fn(const Denoiser& net, const ConsistencyHead& head, const Var& x, const std::vector<int>& t,
                   const std::vector<int>& c, const NoiseSchedule& sched) {
    std::vector<double> skip, out;
    for (int ti : t) {
        skip.push_back(head.c_skip(ti));
        out.push_back(head.c_out(ti));
    }
    return ops::scale_rows(x, skip) + ops::scale_rows(predict_x0(net, x, t, c, 0.0, sched), out);
}

DistillState make_distill_state(std::shared_ptr<const Denoiser> teacher, const DenoiserModel& init,
                                const DistillConfig& config, const NoiseSchedule& sched) {
    require(teacher != nullptr, "distill: teacher required");
    require(config.fake_ratio >= 1, "distill: fake_ratio must be >= 1");
    require(config.m >= 1, "distill: m must be >= 1");
    require(config.batch >= 1, "distill: batch must be positive");
    require(config.vsd_t_lo > 0.0 && config.vsd_t_lo < config.vsd_t_hi && config.vsd_t_hi < 1.0,
            "distill: need 0 < vsd_t_lo < vsd_t_hi < 1");
    require(init.latent_dim() == teacher->latent_dim() && init.num_classes() == teacher->num_classes(),
            "distill: student init does not match the teacher");
    DistillState s{std::move(teacher), init, init, init, AdamW(), AdamW(), config, sched, {}, {}, 0};
    s.student.set_param_kind(config.student_kind);
    s.target.set_param_kind(config.student_kind);
    AdamWConfig so;
    so.lr = config.lr_student;
    s.student_opt = AdamW(so);
    AdamWConfig fo;
    fo.lr = config.lr_fake;
    s.fake_opt = AdamW(fo);
    s.cd_grid = ddim_grid(sched, config.cd_steps);
    require(s.cd_grid.size() >= static_cast<std::size_t>(config.m) + 1, "distill: cd grid needs at least m + 1 steps");
    s.config.head.t_min = s.cd_grid.front();
    s.student_grid = make_grid(config.student_grid, sched);
    require(s.student_grid.front() >= s.config.head.t_min,
            "distill: student grid must not go below the lowest CD step " + std::to_string(s.config.head.t_min));
    return s;
}

DistillState make_distill_state(const DenoiserModel& teacher, const DistillConfig& config,
                                const NoiseSchedule& sched) {
    return make_distill_state(std::make_shared<DenoiserModel>(teacher), teacher, config, sched);
}

Var student_sample(const DistillState& s, const std::vector<int>& c, Rng& rng, GradMode mode) {
    const TimeGrid& g = s.student_grid;
    require(g.size() > 0, "student_sample: empty grid");
    const std::size_t K = g.size(), n = c.size();
    std::size_t pick = K;
    if (mode == GradMode::last_step) {
        pick = 0;
    } else if (mode == GradMode::one_random_step) {
        pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(K) - 1));
    }
    Var x = Var::constant(rng.normal({n, s.student.latent_dim()}));
    Var x0;
    for (std::size_t i = K; i-- > 0;) {
        const auto t = repeat(g[i], n);
        if (i > pick || pick == K) {
            NoGradGuard ng;
            x0 = consistency_fn(s.student, s.config.head, x, t, c, s.sched).detach();
        } else if (i == pick) {
            x0 = consistency_fn(s.student, s.config.head, x, t, c, s.sched);
        } else {
            FreezeParamsGuard fp;
            x0 = consistency_fn(s.student, s.config.head, x, t, c, s.sched);
        }
        if (i > 0) {
            const int tp = g[i - 1];
            x = ops::add_const(ops::scale(x0, s.sched.a(tp)), scaled(rng.normal({n, s.student.latent_dim()}), s.sched.b(tp)));
        }
    }
    return x0;
}

Tensor student_sample(const DistillState& s, const std::vector<int>& c, Rng& rng) {
    NoGradGuard ng;
    return student_sample(s, c, rng, GradMode::none).value();
}

Var cd_loss_with(const ConsistencyFn& f_student, const ConsistencyFn& f_target, const Denoiser& teacher,
                 const ConsistencyHead& head, const Tensor& x0, const std::vector<int>& c, std::size_t n, int m,
                 const TimeGrid& cd_grid, double w_cd, const Tensor& eps, const NoiseSchedule& sched) {
    require(m >= 1 && n + static_cast<std::size_t>(m) < cd_grid.size(), "cd_loss: n + m outside the CD grid");
    const int t_n = cd_grid[n], t_nm = cd_grid[n + static_cast<std::size_t>(m)];
    const std::size_t rows = x0.rows();
    const Tensor x_nm = forward_diffuse(x0, t_nm, eps, sched);
    Var target;
    {
        NoGradGuard ng;
        Rng unused(0);
        const Tensor x_n = denoise_m(teacher, x_nm, t_nm, t_n, cd_grid, m, c, w_cd, sched, NoiseMode::ddim, unused);
        target = f_target(Var::constant(x_n), repeat(t_n, rows), c);
    }
    target = target.detach();
    const Var pred = f_student(Var::constant(x_nm), repeat(t_nm, rows), c);
    return ops::scale(head.distance_loss(pred, target), head.lambda(t_n));
}

Var cd_loss_at(const Denoiser& student, const Denoiser& target, const Denoiser& teacher, const ConsistencyHead& head,
               const Tensor& x0, const std::vector<int>& c, std::size_t n, int m, const TimeGrid& cd_grid,
               double w_cd, const Tensor& eps, const NoiseSchedule& sched) {
    auto f = [&](const Denoiser& net) {
        return [&net, &head, &sched](const Var& x, const std::vector<int>& t, const std::vector<int>& cc) {
            return consistency_fn(net, head, x, t, cc, sched);
        };
    };
    return cd_loss_with(f(student), f(target), teacher, head, x0, c, n, m, cd_grid, w_cd, eps, sched);
}

std::size_t sample_cd_index(std::size_t grid_size, int m, Rng& rng) {
    require(m >= 1 && grid_size > static_cast<std::size_t>(m), "sample_cd_index: grid too short for m");
    const long valid = static_cast<long>(grid_size) - m;
    long n = rng.uniform_int(0, static_cast<long>(grid_size) - 1);
    if (n >= valid) {
        n = rng.uniform_int(0, valid - 1);
    }
    return static_cast<std::size_t>(n);
}

Var cd_loss(const DistillState& s, const Tensor& x0, const std::vector<int>& c, Rng& rng) {
    const std::size_t n = sample_cd_index(s.cd_grid.size(), s.config.m, rng);
    const Tensor eps = rng.normal(x0.shape());
    return cd_loss_at(s.student, s.target, *s.teacher, s.config.head, x0, c, n, s.config.m, s.cd_grid,
                      s.config.w_cd, eps, s.sched);
}

Var vsd_surrogate(const Denoiser& teacher, const Denoiser& fake, const Var& x_hat, const std::vector<int>& c,
                  const std::vector<int>& t, const Tensor& eps, double w_vsd, const NoiseSchedule& sched) {
    const std::size_t n = x_hat.rows(), D = x_hat.value().size() / n;
    require(t.size() == n && eps.size() == n * D, "vsd_surrogate: shape mismatch");
    // Everything below the stop-gradient derives from the detached sample.
    const Tensor xd = x_hat.detach().value();
    const Tensor x_t = forward_diffuse_rows(xd, t, eps, sched);
    Tensor x0_real, x0_fake;
    {
        NoGradGuard ng;
        x0_real = predict_x0(teacher, Var::constant(x_t), t, c, w_vsd, sched).value();
        x0_fake = predict_x0(fake, Var::constant(x_t), t, c, 0.0, sched).value();
    }
    Tensor goal = xd;
    for (std::size_t i = 0; i < n; ++i) {
        const double abar = sched.alpha_bar(t[i]);
        const double a = std::sqrt(abar), b2 = 1.0 - abar;
        require(b2 > 0.0, "vsd_surrogate: t must be positive");
        // s_real - s_fake = a (x0_real - x0_fake) / b^2
        std::vector<double> ds(D);
        double mabs = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            ds[d] = a * (x0_real[i * D + d] - x0_fake[i * D + d]) / b2;
            mabs += std::abs(ds[d]);
        }
        const double eta = b2 / (mabs / static_cast<double>(D) + 1e-8);
        for (std::size_t d = 0; d < D; ++d) {
            goal[i * D + d] += eta * ds[d];
        }
    }
    return ops::mean(ops::row_sum(ops::scale(ops::square(x_hat - Var::constant(goal)), 0.5)));
}

Var vsd_loss(const DistillState& s, const std::vector<int>& c, Rng& rng, Tensor* x_hat_out) {
    const Var x_hat = student_sample(s, c, rng, s.config.grad_mode);
    if (x_hat_out != nullptr) {
        *x_hat_out = x_hat.value();
    }
    const int T = s.sched.T();
    const long lo = static_cast<long>(std::ceil(s.config.vsd_t_lo * T));
    const long hi = static_cast<long>(std::floor(s.config.vsd_t_hi * T));
    std::vector<int> t(c.size());
    for (auto& ti : t) {
        ti = static_cast<int>(rng.uniform_int(lo, hi));
    }
    const Tensor eps = rng.normal(x_hat.shape());
    return vsd_surrogate(*s.teacher, s.fake, x_hat, c, t, eps, s.config.w_vsd, s.sched);
}

double fake_score_update(DistillState& s, const std::vector<int>& c, Rng& rng) {
    const Tensor x = student_sample(s, c, rng);
    std::vector<int> t(c.size());
    for (auto& ti : t) {
        ti = static_cast<int>(rng.uniform_int(1, s.sched.T()));
    }
    const Tensor eps = rng.normal(x.shape());
    const auto params = s.fake.parameters();
    zero_grads(params);
    const Var loss = diffusion_loss(s.fake, x, c, t, eps, s.sched);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
        throw NumericalError("fake_score_update: non-finite loss");
    }
    backward(loss);
    const auto st = s.fake_opt.step(params);
    if (!st.ok) {
        throw NumericalError("fake_score_update: " + st.diagnostic);
    }
    return value;
}

void update_target(DistillState& s) {
    const auto tgt = s.target.parameters(), src = s.student.parameters();
    const double r = s.config.ema_rate;
    if (r == 0.0) {
        copy_values(tgt, src);
        return;
    }
    for (std::size_t i = 0; i < tgt.size(); ++i) {
        Var p = tgt[i];
        Tensor& v = p.mutable_value();
        const Tensor& w = src[i].value();
        for (std::size_t j = 0; j < v.size(); ++j) {
            v[j] = r * v[j] + (1.0 - r) * w[j];
        }
    }
}

DistillResult distill_loop(DistillState& s, const LabeledData& data, RewardBundle* reward, const LatentCodec& codec,
                           long iters, std::uint64_t seed, const DistillHooks& hooks) {
    require(data.size() > 0, "distill_loop: empty dataset");
    require(data.x.cols() == s.student.latent_dim(), "distill_loop: data does not match the latent dimension");
    codec.require_frozen("distill_loop");
    const auto& cfg = s.config;
    const bool vsd_on = cfg.beta_vsd > 0.0, cd_on = cfg.beta_cd > 0.0;
    const bool ft_on = reward != nullptr && reward->mode != RewardMode::none && cfg.beta_ft > 0.0;
    const bool lrm_on = ft_on && reward->mode == RewardMode::lrm;
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(seed);
    DistillResult res;
    const std::size_t B = cfg.batch;
    const int K = s.num_real_classes();
    const auto student_params = s.student.parameters();
    std::vector<double> last_good = flatten_values(all_params(s, reward));

    for (long it = 0; it < iters; ++it) {
        DistillLogRow row;
        row.iter = s.iteration;
        try {
            std::vector<int> c_real(B), c_gen(B);
            Tensor x_real({B, data.x.cols()});
            for (std::size_t i = 0; i < B; ++i) {
                const auto k = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(data.size()) - 1));
                for (std::size_t d = 0; d < data.x.cols(); ++d) {
                    x_real.at(i, d) = data.x.at(k, d);
                }
                c_real[i] = cfg.unconditional ? s.teacher->null_class() : data.c[k];
                c_gen[i] = static_cast<int>(rng.uniform_int(0, K - 1));
                if (cfg.unconditional) {
                    c_gen[i] = s.teacher->null_class();
                }
            }

            Tensor x_gen;
            if (vsd_on || cd_on) {
                zero_grads(student_params);
                Var total;
                if (vsd_on) {
                    const Var lv = vsd_loss(s, c_gen, rng, &x_gen);
                    row.l_vsd = lv.value()[0];
                    total = ops::scale(lv, cfg.beta_vsd);
                    res.trace.emplace_back("vsd");
                }
                if (cd_on) {
                    const Var lc = cd_loss(s, x_real, c_real, rng);
                    row.l_cd = lc.value()[0];
                    const Var term = ops::scale(lc, cfg.beta_cd);
                    total = total.defined() ? total + term : term;
                    res.trace.emplace_back("cd");
                }
                if (!std::isfinite(total.value()[0])) {
                    throw NumericalError("generator loss is not finite");
                }
                backward(total);
                const auto st = s.student_opt.step(student_params);
                if (!st.ok) {
                    throw NumericalError("generator step: " + st.diagnostic);
                }
                update_target(s);
                res.trace.emplace_back("generator");
            }
            if (vsd_on) {
                std::vector<double> fl;
                for (int k = 0; k < cfg.fake_ratio; ++k) {
                    fl.push_back(fake_score_update(s, c_gen, rng));
                    res.trace.emplace_back("fake");
                }
                row.fake_loss = mean_of(fl);
            }
            if (x_gen.empty() && reward != nullptr) {
                x_gen = student_sample(s, c_gen, rng);
            }
            if (lrm_on) {
                row.lrm_loss = lrm_train_step(*reward, codec, x_real, c_real, x_gen, c_gen);
                res.trace.emplace_back("lrm");
            }
            if (ft_on) {
                if (reward->mode == RewardMode::lrm) {
                    row.l_ft = lrm_finetune_step(s, reward->lrm, c_gen, rng);
                    res.trace.emplace_back("finetune");
                } else {
                    row.l_ft = ddpo_step(s, reward->pixel, codec, c_gen, cfg.ddpo_trunc, rng);
                    res.trace.emplace_back("ddpo");
                }
            }
            if (reward != nullptr && reward->pixel.fn) {
                const Tensor r = reward->pixel.evaluate_batch(codec.decode(x_gen), c_gen);
                row.reward = mean_of(r.to_vector());
            }
            for (double v : {row.l_vsd, row.l_cd, row.l_ft, row.fake_loss, row.lrm_loss}) {
                if (!std::isfinite(v)) {
                    throw NumericalError("non-finite loss at iteration " + std::to_string(s.iteration));
                }
            }
        } catch (const NumericalError& e) {
            assign_values(all_params(s, reward), last_good);
            res.halted = true;
            res.halt_reason = e.what();
            break;
        }
        last_good = flatten_values(all_params(s, reward));
        res.log.push_back(row);
        ++s.iteration;
        ++res.iterations;
        if (hooks.on_eval && hooks.every > 0 && (res.iterations % hooks.every == 0 || it + 1 == iters)) {
            hooks.on_eval(s, s.iteration);
        }
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

std::vector<std::pair<std::string, Checkpoint>> distill_checkpoints(const DistillState& s) {
    std::vector<std::pair<std::string, Checkpoint>> out;
    for (const auto& [name, net] : {std::pair<const char*, const DenoiserModel*>{"student", &s.student},
                                    {"fake", &s.fake},
                                    {"target", &s.target}}) {
        Checkpoint ck = net->to_checkpoint();
        ck.meta["role"] = name;
        ck.meta["iteration"] = s.iteration;
        ck.meta["student_grid"] = s.student_grid.steps;
        ck.meta["head"] = {{"t_min", s.config.head.t_min},
                           {"sigma_d", s.config.head.sigma_d},
                           {"time_scale", s.config.head.time_scale}};
        out.emplace_back(name, std::move(ck));
    }
    return out;
}

std::string distill_log_csv(const std::vector<DistillLogRow>& log) {
    std::ostringstream os;
    os.precision(10);
    os << "iter,L_VSD,L_CD,L_FT,fake_loss,reward,lrm_loss\n";
    for (const auto& r : log) {
        os << r.iter << ',' << r.l_vsd << ',' << r.l_cd << ',' << r.l_ft << ',' << r.fake_loss << ',' << r.reward
           << ',' << r.lrm_loss << '\n';
    }
    return os.str();
}

}  // namespace dollar
