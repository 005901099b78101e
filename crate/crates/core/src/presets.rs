//! Ready-made scenarios.

use crate::geometry::{FeatureMode, Point3, RisPanel, RxGrid, Scenario, SCENARIO_SCHEMA_VERSION};

const Y: Point3 = Point3::new(0.0, 1.0, 0.0);
const Z: Point3 = Point3::new(0.0, 0.0, 1.0);

/// Indoor room: an 8x8 panel on the `x = 0` wall, transmitter off to one
/// side, receivers on a 50 x 40 grid at 0.2 m pitch, 1.5 m above the floor.
pub fn desk(seed: u64) -> Scenario {
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        tx_m: Point3::new(4.0, -6.0, 3.0),
        ris: RisPanel::new(Point3::new(0.0, 0.0, 2.0), 8, 8, Y, Z),
        rx_grid: RxGrid {
            origin_m: Point3::new(1.0, -4.0, 1.5),
            rows: 50,
            cols: 40,
            pitch_m: 0.2,
        },
        carrier_freq_hz: 28e9,
        bandwidth_hz: 100e6,
        num_subcarriers: 16,
        snr_budget_linear: 1e10,
        feature_mode: FeatureMode::PerElement,
        seed,
    }
}

/// Street-scale layout with a 16x16 panel and 512 subcarriers.
pub fn street(seed: u64) -> Scenario {
    Scenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        tx_m: Point3::new(40.0, -60.0, 6.0),
        ris: RisPanel::new(Point3::new(0.0, 0.0, 6.0), 16, 16, Y, Z),
        rx_grid: RxGrid {
            origin_m: Point3::new(10.0, -40.0, 2.0),
            rows: 181,
            cols: 300,
            pitch_m: 0.2,
        },
        carrier_freq_hz: 28e9,
        bandwidth_hz: 100e6,
        num_subcarriers: 512,
        snr_budget_linear: 10f64.powf(0.5) * 1e15,
        feature_mode: FeatureMode::PanelCenter,
        seed,
    }
}
