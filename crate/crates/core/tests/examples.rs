// SPDX-License-Identifier: MIT OR Apache-2.0

macro_rules! example {
    ($module:ident, $path:literal) => {
        #[path = $path]
        mod $module;

        #[test]
        fn $module() {
            $module::run_example().expect(concat!($path, " runs"));
        }
    };
}

example!(load_and_validate, "../examples/load_and_validate.rs");
example!(salience_vs_oracle, "../examples/salience_vs_oracle.rs");
example!(detect_hijackers, "../examples/detect_hijackers.rs");
example!(disentangle, "../examples/disentangle.rs");
example!(toy_decode, "../examples/toy_decode.rs");
example!(planted_aid, "../examples/planted_aid.rs");
example!(area_sweep, "../examples/area_sweep.rs");
