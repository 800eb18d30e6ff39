#![no_main]

use halvingpool::model::PoolSchedule;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schedule) = text.parse::<PoolSchedule>() {
        let again: PoolSchedule = schedule.to_string().parse().expect("display round-trips");
        assert_eq!(again, schedule);
        assert!(schedule.lengths().windows(2).all(|w| w[1] <= w[0]));
    }
});
