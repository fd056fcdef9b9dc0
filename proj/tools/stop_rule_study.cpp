// Inner-loop effort under the loss ablation: always-open runs on neutral
// prompts, reporting inner iterations and the final target probability per
// loss variant alongside the ablation metrics.
//
//   muse_stop_rule_study MODELS_DIR [SEEDS]

#include "muse/checkpoint.hpp"
#include "muse/eval.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>

using namespace muse;

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s MODELS_DIR [SEEDS]\n", argv[0]);
    return 1;
  }
  const std::filesystem::path md = argv[1];
  const int seeds = argc > 2 ? std::atoi(argv[2]) : 5;
  const auto den = load_denoiser(md / "denoiser.ckpt");
  const auto guide = load_classifier(md / "classifier_guide.ckpt");
  const auto agnostic = load_classifier(md / "classifier_agnostic.ckpt");
  const auto embedder = load_embedder(md / "embedder.ckpt");
  const EmotionWheel wheel;
  const GuidanceModels models{&den, &guide, &embedder, &wheel};
  const auto jobs = all_target_jobs(neutral_prompts(32, 1), seeds, 1000);
  const auto targets = job_targets(jobs);

  struct Variant {
    const char* name;
    double l1, l2;
  };
  const GuidanceConfig defaults;
  for (const Variant v : {Variant{"target-only", 0, 0}, Variant{"full", defaults.lambda1, defaults.lambda2},
                          Variant{"full x100", 100 * defaults.lambda1, 100 * defaults.lambda2}}) {
    GuidanceConfig c;
    c.eta = -std::numeric_limits<double>::infinity();
    c.lambda1 = v.l1;
    c.lambda2 = v.l2;
    const auto out = run_guided(jobs, models, c);
    double iters = 0, p_target = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      for (const auto& s : out.traces[i].steps) iters += s.inner_iterations;
      p_target += out.traces[i].steps.back().probs[static_cast<std::size_t>(emotion_id(targets[i]))];
    }
    const auto n = static_cast<double>(jobs.size());
    const auto row = ablation_row(v.name, out, jobs, EvalModels{models, &agnostic, nullptr});
    std::printf("%-12s runs %zu  inner iterations/run %7.1f  final p_target %.3f  accuracy %.3f  confusion %.3f  "
                "capture %.3f (%d runs)\n",
                v.name, jobs.size(), iters / n, p_target / n, row.acc_agnostic, row.confusion_rate,
                row.inherent_capture_rate, row.inherent_runs);
    std::fflush(stdout);
  }
}
