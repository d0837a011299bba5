// Trains a small segmentation model on synthetic volumes, then segments held-out cases.
//
//   semiseg_demo_quickstart [iterations_per_epoch]
//
// Stage 1 pretrains on every volume, stage 2 adds consistency regularization on unlabeled
// volumes, and the result is scored with sliding-window inference on two validation cases.

#include <cstdlib>
#include <iostream>

#include "semiseg/trainer.hpp"

using namespace semiseg;

int main(int argc, char** argv) {
  const int iterations = argc > 1 ? std::atoi(argv[1]) : 4;
  if (iterations < 1) {
    std::cerr << "usage: semiseg_demo_quickstart [iterations_per_epoch >= 1]\n";
    return 2;
  }

  const Extent3 extent{48, 48, 48};
  TrainData data;
  std::vector<Case> val;
  for (int i = 0; i < 10; ++i) {
    Case c = generate_synthetic_case(100 + i, extent, 3, 3, "demo_" + std::to_string(i)).data;
    c = preprocess_case(c, Preprocessing{});
    if (i < 4) {
      data.labeled.push_back(c);
    } else if (i < 6) {
      val.push_back(c);
    } else {
      data.unlabeled.push_back(c.volume);
    }
  }

  auto config = [&](Stage s, int epochs) {
    RunConfig c = RunConfig::test(s);
    c.model.base_channels = 4;
    c.schedule.total_epochs = epochs;
    c.schedule.iterations_per_epoch = iterations;
    return c;
  };
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& e) { std::cout << to_json(e).dump() << '\n'; };

  const StageResult pre = run_stage1(config(Stage::pretrain, 5), data.all_volumes(), hooks);
  UNet<float> model(config(Stage::cr, 1).model, 0);
  run_stage2(config(Stage::cr, 10), data, &pre.final_checkpoint, {}, hooks, &model);

  ValidationConfig v;
  v.inference.mirror_axes = {1, 2};
  const MetricReport report = validate(model, val, v);
  std::cout << summary_json(report).dump(2) << '\n';
  return 0;
}
