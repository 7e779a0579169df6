// Copyright 2026 The ternvit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "ternvit/train.hpp"

#include <iomanip>
#include <sstream>

namespace ternvit {

std::string traces_to_csv(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "phase,epoch,train_loss,train_acc,eval_acc\n";
  for (const auto& r : rows)
    os << r.phase << ',' << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ','
       << r.eval_acc << '\n';
  return os.str();
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "setup";
  for (const auto& r : rows) os << ",\"(" << r.phase_a << ',' << r.phase_b << ")\"";
  os << "\ntrain_loss";
  for (const auto& r : rows) os << ',' << r.final_train_loss;
  os << "\neval_acc";
  for (const auto& r : rows) os << ',' << r.final_eval_acc;
  os << '\n';
  return os.str();
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "pipeline,final_train_loss,final_train_acc,final_eval_acc\n";
  for (const auto& r : rows)
    os << r.pipeline << ',' << r.final_train_loss << ',' << r.final_train_acc << ','
       << r.final_eval_acc << '\n';
  return os.str();
}

}  // namespace ternvit
