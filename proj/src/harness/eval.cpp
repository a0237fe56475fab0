#include <algorithm>
#include <cmath>
#include <numeric>

#include "harness/internal.hpp"
#include "nem/errors.hpp"
#include "nem/harness.hpp"

namespace nem {

namespace {

std::size_t target_frame(const UnrollConfig& u, std::size_t t, std::size_t frames) {
  if (frames == 1) return 0;
  return u.next_step_prediction && t + 1 < frames ? t + 1 : t;
}

double least_two(std::span<const float> gamma, std::size_t k, std::span<const std::int16_t> gt) {
  const std::size_t d = gt.size();
  std::vector<double> mass(k, 0.0);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < d; ++i)
      if (gt[i] > 0) mass[j] += gamma[j * d + i];
  const double total = std::accumulate(mass.begin(), mass.end(), 0.0);
  if (total <= 0) return std::numeric_limits<double>::quiet_NaN();
  std::sort(mass.begin(), mass.end());
  return (mass[0] + mass[1]) / total;
}

}  // namespace

EvalReport evaluate(const ExperimentConfig& cfg, const ParameterStore<float>& params,
                    const std::vector<SequenceSample>& samples) {
  const NemModel<float> model = detail::make_model(cfg);
  check_params(params, model, cfg.seed);
  check_dataset(cfg, samples, "evaluation set");
  const UnrollConfig u = cfg.eval_unroll_config();
  u.validate();
  const std::size_t frames = samples[0].t;
  const std::size_t k = u.k, d = samples[0].frame_size();

  EvalReport r;
  r.k = k;
  r.steps = unroll_steps(u, frames);

  std::vector<std::vector<double>> curves;
  std::vector<double> final_ami, seed_means, least, bce_up, bce_mix;
  double loss_total = 0;

  UnrollOptions<float> opt;
  opt.record_trace = true;
  std::vector<std::size_t> idx;
  std::vector<std::uint64_t> seeds;
  for (std::size_t rep = 0; rep < cfg.eval_seeds; ++rep) {
    std::vector<double> rep_ami;
    for (std::size_t start = 0; start < samples.size(); start += cfg.batch) {
      const std::size_t end = std::min(samples.size(), start + cfg.batch);
      idx.resize(end - start);
      std::iota(idx.begin(), idx.end(), start);
      seeds.clear();
      for (std::size_t i : idx) seeds.push_back(detail::eval_sample_seed(cfg, rep, i));
      Tape<float> tape;
      ParamBinding<float> p(tape, params, false);
      const auto res = unroll(p, model, batch_frames<float>(samples, idx), seeds, u, opt);
      for (float v : res.per_sample.values()) loss_total += v;

      for (std::size_t b = 0; b < idx.size(); ++b) {
        const SequenceSample& s = samples[idx[b]];
        std::vector<double> curve(res.trace.size());
        for (std::size_t t = 0; t < res.trace.size(); ++t) {
          const auto gamma = res.trace[t].gamma.values().subspan(b * k * d, k * d);
          const auto labels = s.labels(target_frame(u, t, frames));
          try {
            curve[t] = ami_from_gamma(gamma, k, labels, cfg.normalizer);
          } catch (const UndefinedScoreError&) {
            curve[t] = std::numeric_limits<double>::quiet_NaN();
          }
          if (u.next_step_prediction && frames > 1 && t + 1 < frames) {
            const auto psi = res.trace[t].psi.values().subspan(b * k * d, k * d);
            bce_up.push_back(bce_upper_bound(psi, k, s.frame(t + 1)));
            bce_mix.push_back(bce_mixture(psi, gamma, k, s.frame(t + 1)));
          }
        }
        const std::size_t last = res.trace.size() - 1;
        rep_ami.push_back(curve[last]);
        if (k >= 3) {
          least.push_back(least_two(res.trace[last].gamma.values().subspan(b * k * d, k * d), k,
                                    s.labels(target_frame(u, last, frames))));
        }
        curves.push_back(std::move(curve));
      }
    }
    const MeanStd ms = mean_std(rep_ami);
    if (ms.count) seed_means.push_back(ms.mean);
    final_ami.insert(final_ami.end(), rep_ami.begin(), rep_ami.end());
  }

  r.loss = loss_total / static_cast<double>(samples.size() * cfg.eval_seeds);
  const MeanStd all = mean_std(final_ami);
  r.ami_mean = all.count ? all.mean : std::numeric_limits<double>::quiet_NaN();
  r.ami_std_samples = all.std;
  r.ami_count = all.count;
  r.ami_std_seeds = mean_std(seed_means).std;
  if (!bce_up.empty()) {
    r.bce_upper = mean_std(bce_up).mean;
    r.bce_mixture = mean_std(bce_mix).mean;
  }
  if (!least.empty()) r.least_two_mass = mean_std(least).mean;
  r.curve = per_step_curve(curves);
  return r;
}

void log_report(RunLog& log, const EvalReport& r, const std::string& phase) {
  log.metric(phase, 0, -1, "k", static_cast<double>(r.k));
  log.metric(phase, 0, -1, "steps", static_cast<double>(r.steps));
  log.metric(phase, 0, -1, "loss", r.loss);
  log.metric(phase, 0, -1, "ami", r.ami_mean);
  log.metric(phase, 0, -1, "ami_std_seeds", r.ami_std_seeds);
  log.metric(phase, 0, -1, "ami_std_samples", r.ami_std_samples);
  log.metric(phase, 0, -1, "ami_count", static_cast<double>(r.ami_count));
  log.metric(phase, 0, -1, "bce_upper", r.bce_upper);
  log.metric(phase, 0, -1, "bce_mixture", r.bce_mixture);
  log.metric(phase, 0, -1, "least_two_mass", r.least_two_mass);
  for (const CurvePoint& p : r.curve) {
    const long step = static_cast<long>(p.step);
    log.metric(phase, 0, step, "ami_mean", p.mean);
    log.metric(phase, 0, step, "ami_q25", p.q25);
    log.metric(phase, 0, step, "ami_q75", p.q75);
  }
}

}  // namespace nem
