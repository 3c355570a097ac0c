// Copyright davs contributors
// SPDX-License-Identifier: Apache-2.0

#include <string>
#include <vector>

#include "CLI11.hpp"
#include "davs/cli/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{
      "davs: disentangled audio-visual embedding and talking-face "
      "generation on a procedural toy world"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  auto add_common = [&](CLI::App* cmd, bool out_required = true) {
    cmd->add_option("--config", config_path,
                    "JSON config file with sections toy, network, train, "
                    "weights, eval (omitted sections use defaults)");
    cmd->add_option("--overrides", overrides,
                    "section.key=value assignments applied after the file");
    auto* o = cmd->add_option("--out", out_dir, "output directory");
    if (out_required) o->required();
  };

  auto* toygen =
      app.add_subcommand("toygen", "synthesize the toy dataset splits");
  add_common(toygen);

  davs::cli::TrainOptions train_opts;
  auto* train = app.add_subcommand("train", "train a model");
  add_common(train);
  train->add_option("--data", train_opts.data_manifest,
                    "training split manifest.json")
      ->required();
  train->add_option("--phase", train_opts.phase,
                    "embed, gen or all (default all)");
  train->add_flag("--resume", train_opts.resume,
                  "continue the run already in --out");

  davs::cli::EvalOptions eval_opts;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", eval_opts.checkpoint,
                   "checkpoint directory")
      ->required();
  eval->add_option("--data", eval_opts.data_manifest,
                   "evaluation split manifest.json")
      ->required();
  eval->add_option("--train-data", eval_opts.train_manifest,
                   "training split manifest.json (needed by the probe)");
  eval->add_option("--metrics", eval_opts.metrics,
                   "subset of recognition,retrieval,probe,psnr,fidelity "
                   "(default all)")
      ->delimiter(',');

  davs::cli::InferOptions infer_opts;
  auto* infer = app.add_subcommand(
      "infer", "generate a talking-face clip from one identity image");
  add_common(infer);
  infer->add_option("--checkpoint", infer_opts.checkpoint,
                    "checkpoint directory")
      ->required();
  infer->add_option("--identity", infer_opts.identity_image,
                    "identity frame (.png or .f32raw)")
      ->required();
  infer->add_option("--source", infer_opts.speech_source,
                    "speech source (.wav, .f32raw clip or PNG directory)")
      ->required();
  infer->add_option("--source-kind", infer_opts.source_kind,
                    "audio or video (default audio)");
  infer->add_flag("--video", infer_opts.write_video,
                  "also write an uncompressed AVI of the generated frames");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return davs::cli::kExitConfig;
  }

  davs::cli::RunSpec spec;
  spec.config_path = config_path;
  spec.overrides = overrides;
  spec.out_dir = out_dir;
  if (toygen->parsed()) {
    spec.command = "toygen";
    return davs::cli::cmd_toygen(spec);
  }
  if (train->parsed()) {
    spec.command = "train";
    return davs::cli::cmd_train(spec, train_opts);
  }
  if (eval->parsed()) {
    spec.command = "eval";
    return davs::cli::cmd_eval(spec, eval_opts);
  }
  spec.command = "infer";
  return davs::cli::cmd_infer(spec, infer_opts);
}
