// Copyright 2026 The xtrace Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "xtrace/config.hpp"
#include "xtrace/engine.hpp"
#include "xtrace/trace_actions.hpp"
#include "xtrace/vm.hpp"

namespace xtrace::demo {

// Same text as programs/ghost_bug.prog and configs/ghost_bug.json.
inline constexpr std::string_view kGhostBugProgram = R"prog(# A hybrid page whose fragment fires a JS event while its view is created.
# Deep inside the WebView, the posture provider registers a window-layout
# listener using whatever context it was handed.

class com.example.hybrid.spark.page.SparkActivity
  method onStart()
    call androidx.fragment.app.FragmentController.dispatchStart()
    ret

class androidx.fragment.app.FragmentController
  method dispatchStart()
    pushconst 7
    call androidx.fragment.app.Fragment.performCreateView(android.view.LayoutInflater)
    ret

class androidx.fragment.app.Fragment
  method performCreateView(android.view.LayoutInflater)
    loadarg 0
    call com.example.hybrid.spark.page.SparkFragment.onCreateView(android.view.LayoutInflater)
    ret

class com.example.hybrid.spark.page.SparkFragment
  method onCreateView(android.view.LayoutInflater)
    pushconst "pageShow"
    call com.example.lynx.hybrid.webkit.WebKitView.sendEventByJson(java.lang.String)
    ret

class com.example.lynx.hybrid.webkit.WebKitView
  method sendEventByJson(java.lang.String)
    loadarg 0
    pushconst 0
    call android.webkit.WebView.evaluateJavascript(java.lang.String,android.webkit.ValueCallback)
    ret

class android.webkit.WebView
  method evaluateJavascript(java.lang.String,android.webkit.ValueCallback)
    loadarg 0
    loadarg 1
    call com.android.webview.chromium.WebViewChromium.evaluateJavascript(java.lang.String,android.webkit.ValueCallback)
    ret

class com.android.webview.chromium.WebViewChromium
  method evaluateJavascript(java.lang.String,android.webkit.ValueCallback)
    call org.chromium.content.browser.device_posture.DevicePosturePlatformProviderAndroid.startListening()
    ret

class org.chromium.content.browser.device_posture.DevicePosturePlatformProviderAndroid
  method startListening()
    # 1 is the application context, which has no display.
    pushconst 1
    call androidx.window.layout.WindowInfoTrackerImpl.windowLayoutInfo(android.content.Context)
    ret

class androidx.window.layout.WindowInfoTrackerImpl
  method windowLayoutInfo(android.content.Context)
    loadarg 0
    pushconst 42
    call androidx.window.extensions.layout.WindowLayoutComponentImpl.addWindowLayoutInfoListener(android.content.Context,androidx.core.util.Consumer)
    ret

class androidx.window.extensions.layout.WindowLayoutComponentImpl
  method addWindowLayoutInfoListener(android.content.Context,androidx.core.util.Consumer)
    loadarg 0
    ret
)prog";

inline constexpr std::string_view kGhostBugConfig = R"cfg({
  "config_id": "ghost-bug-1",
  "rollout_fraction": 1.0,
  "approved": true,
  "dynamic_trace_config": [
    {
      "action": 1,
      "className": "androidx.window...WindowLayoutComponentImpl",
      "methodName": "addWindowLayoutInfoListener",
      "methodSign": "android.content.Context,androidx...Consumer"
    }
  ]
}
)cfg";

inline const MethodRef& ghost_bug_entry() {
  static const MethodRef kEntry{"com.example.hybrid.spark.page.SparkActivity", "onStart", {}};
  return kEntry;
}

/// Framework code ships precompiled; app code starts interpreted.
inline std::vector<MethodRef> ghost_bug_precompiled() {
  return {
      MethodRef{"android.webkit.WebView", "evaluateJavascript", {"java.lang.String", "android.webkit.ValueCallback"}},
      MethodRef{"com.android.webview.chromium.WebViewChromium", "evaluateJavascript",
                {"java.lang.String", "android.webkit.ValueCallback"}},
      MethodRef{"androidx.window.extensions.layout.WindowLayoutComponentImpl", "addWindowLayoutInfoListener",
                {"android.content.Context", "androidx.core.util.Consumer"}},
  };
}

struct GhostBugRun {
  std::vector<TraceEvent> events;
  std::vector<std::string> warnings;
  nlohmann::json engine_status;
  std::int64_t result = 0;
};

/// Loads the page, applies `config_text`, starts the activity once and
/// returns what was captured.
inline GhostBugRun run_ghost_bug(std::string_view config_text = kGhostBugConfig) {
  Vm vm;
  vm.load_program(kGhostBugProgram);
  for (const auto& ref : ghost_bug_precompiled()) vm.jit_compile(ref);
  EventSink sink;
  Engine engine(vm, sink);
  auto cfg = parse_config(config_text);
  auto resolution = resolve_targets(cfg, vm.registry());
  GhostBugRun run;
  run.warnings = resolution.warnings;
  engine.apply(std::move(resolution.targets));
  run.engine_status = engine.status();
  auto thread = vm.new_thread();
  run.result = vm.invoke(thread, ghost_bug_entry(), {});
  engine.deactivate_and_restore();
  run.events = sink.drain().events;
  return run;
}

/// One `at cls.method` line per frame, innermost first.
inline std::string format_stack(const std::vector<CallFrame>& frames) {
  std::string out;
  for (const auto& f : frames) out += "at " + f.method_ref.short_name() + "\n";
  return out;
}

}  // namespace xtrace::demo
