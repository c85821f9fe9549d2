//! Background horizon generation with a last-value-wins handoff.

use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::pipeline::{generate_horizon, HorizonPlan, HorizonRequest};
use super::surrogate::{Command, GaitGenerator, GeneratorState, PlanarPose};
use super::GaitGenError;

enum Request {
    Generate {
        command: Command,
        horizon: HorizonRequest,
        reset_index: usize,
        feet: [Option<PlanarPose>; 2],
    },
    Stop,
}

type Slot = Arc<(Mutex<Option<Result<HorizonPlan, GaitGenError>>>, Condvar)>;

/// Owns a generator and its state on a dedicated thread. Each request
/// produces one plan; an unread plan is overwritten by the next one.
pub struct GaitWorker {
    requests: Sender<Request>,
    slot: Slot,
    handle: Option<JoinHandle<()>>,
}

impl GaitWorker {
    pub fn spawn(generator: GaitGenerator, initial: GeneratorState) -> Self {
        let (tx, rx) = mpsc::channel::<Request>();
        let slot: Slot = Arc::new((Mutex::new(None), Condvar::new()));
        let out = Arc::clone(&slot);
        let handle = std::thread::Builder::new()
            .name("gaitgen".into())
            .spawn(move || {
                let mut state = initial;
                while let Ok(Request::Generate {
                    command,
                    horizon,
                    reset_index,
                    feet,
                }) = rx.recv()
                {
                    for (i, f) in feet.iter().enumerate() {
                        if let Some(p) = f {
                            state.feet[i] = *p;
                        }
                    }
                    let result = generate_horizon(&generator, &state, command, &horizon);
                    if let Ok(plan) = &result {
                        state = plan.reset_state(reset_index).clone();
                    }
                    let (lock, cv) = &*out;
                    *lock.lock().expect("slot poisoned") = Some(result);
                    cv.notify_all();
                }
            })
            .expect("spawn generator thread");
        Self {
            requests: tx,
            slot,
            handle: Some(handle),
        }
    }

    /// Queues a generation. `feet` overrides the stored ground placements.
    pub fn request(
        &self,
        command: Command,
        horizon: HorizonRequest,
        reset_index: usize,
        feet: [Option<PlanarPose>; 2],
    ) {
        // a closed channel means the worker is gone; `latest` will then stay empty
        let _ = self.requests.send(Request::Generate {
            command,
            horizon,
            reset_index,
            feet,
        });
    }

    /// Takes the newest finished plan, if any.
    pub fn latest(&self) -> Option<Result<HorizonPlan, GaitGenError>> {
        self.slot.0.lock().expect("slot poisoned").take()
    }

    /// Waits up to `timeout` for a plan.
    pub fn wait_latest(&self, timeout: Duration) -> Option<Result<HorizonPlan, GaitGenError>> {
        let (lock, cv) = &*self.slot;
        let guard = lock.lock().expect("slot poisoned");
        let (mut guard, _) = cv
            .wait_timeout_while(guard, timeout, |v| v.is_none())
            .expect("slot poisoned");
        guard.take()
    }
}

impl Drop for GaitWorker {
    fn drop(&mut self) {
        let _ = self.requests.send(Request::Stop);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
