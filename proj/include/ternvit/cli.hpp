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

#pragma once

namespace ternvit::cli {

/// Full command-line driver. Returns the process exit code: 0 on success, 1
/// on flag or config validation errors, 2 on runtime failures. Progress goes
/// to stderr; machine-readable CSV goes to files named by flags or to stdout.
int run(int argc, char** argv);

}  // namespace ternvit::cli
